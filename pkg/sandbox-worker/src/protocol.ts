/**
 * Line protocol v1: one JSON request per stdin line, one JSON response per
 * stdout line, preceded by a single handshake line advertising the version.
 */

export const PROTOCOL_VERSION = "1";
export const OUTPUT_CAP_BYTES = 64 * 1024;

export type SandboxStatus = "ok" | "error" | "timeout";

export interface SandboxRequest {
  id: string;
  code: string;
  timeout_ms?: number;
  memory_mb?: number;
}

export interface SandboxResponse {
  id: string;
  status: SandboxStatus;
  stdout: string;
  stderr: string;
  duration_ms: number;
  stdout_truncated?: boolean;
  stderr_truncated?: boolean;
}

export function handshakeLine(): string {
  return JSON.stringify({ protocol_version: PROTOCOL_VERSION });
}

export type ParsedLine =
  | { ok: true; request: SandboxRequest }
  | { ok: false; id: string; diagnostic: string };

/** Parse one request line; malformed input never throws, it reports. */
export function parseRequestLine(line: string): ParsedLine {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch (err) {
    return { ok: false, id: "", diagnostic: `malformed JSON: ${String(err)}` };
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    return { ok: false, id: "", diagnostic: "request must be a JSON object" };
  }
  const record = raw as Record<string, unknown>;
  const id = typeof record.id === "string" ? record.id : "";
  if (typeof record.id !== "string" || record.id.length === 0) {
    return { ok: false, id, diagnostic: "request is missing a string id" };
  }
  if (typeof record.code !== "string") {
    return { ok: false, id, diagnostic: "request is missing code" };
  }
  const timeout = record.timeout_ms;
  if (timeout !== undefined && (typeof timeout !== "number" || timeout <= 0)) {
    return { ok: false, id, diagnostic: "timeout_ms must be a positive number" };
  }
  const memory = record.memory_mb;
  if (memory !== undefined && (typeof memory !== "number" || memory <= 0)) {
    return { ok: false, id, diagnostic: "memory_mb must be a positive number" };
  }
  return {
    ok: true,
    request: {
      id: record.id,
      code: record.code,
      timeout_ms: timeout as number | undefined,
      memory_mb: memory as number | undefined,
    },
  };
}

/** Cap captured output at OUTPUT_CAP_BYTES of UTF-8, flagging the cut. */
export function capOutput(buffer: Buffer): { text: string; truncated: boolean } {
  if (buffer.byteLength <= OUTPUT_CAP_BYTES) {
    return { text: buffer.toString("utf-8"), truncated: false };
  }
  return {
    text: buffer.subarray(0, OUTPUT_CAP_BYTES).toString("utf-8"),
    truncated: true,
  };
}

export function errorResponse(id: string, diagnostic: string): SandboxResponse {
  return { id, status: "error", stdout: "", stderr: diagnostic, duration_ms: 0 };
}
