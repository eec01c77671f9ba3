/**
 * One fresh interpreter process per request: write the snippet to the scratch
 * directory, run it under an address-space limit with network calls stubbed
 * out, kill it at the deadline, and always report a response.
 */

import { spawn } from "node:child_process";
import { unlink, writeFile } from "node:fs/promises";
import path from "node:path";

import {
  SandboxRequest,
  SandboxResponse,
  SandboxStatus,
  capOutput,
} from "./protocol.js";

export interface RunnerOptions {
  pythonBin: string;
  scratchDir: string;
  timeoutDefaultMs: number;
  memoryDefaultMb: number;
}

// Applied inside the child before the snippet runs; the snippet file itself
// stays untouched so tracebacks point at the user's code.
const CHILD_WRAPPER = [
  "import resource, sys",
  "mb = int(sys.argv[1])",
  "cap = mb * 1024 * 1024",
  "resource.setrlimit(resource.RLIMIT_AS, (cap, cap))",
  "import socket",
  "def _blocked(*args, **kwargs):",
  "    raise OSError('network access is disabled in the sandbox')",
  "socket.socket = _blocked",
  "import runpy",
  "snippet = sys.argv[2]",
  "sys.argv = [snippet]",
  "runpy.run_path(snippet, run_name='__main__')",
].join("\n");

let snippetCounter = 0;

export async function executeRequest(
  request: SandboxRequest,
  options: RunnerOptions,
): Promise<SandboxResponse> {
  const timeoutMs = request.timeout_ms ?? options.timeoutDefaultMs;
  const memoryMb = request.memory_mb ?? options.memoryDefaultMb;
  const snippetPath = path.join(
    options.scratchDir,
    `snippet_${process.pid}_${snippetCounter++}.py`,
  );
  await writeFile(snippetPath, request.code, "utf-8");

  const started = Date.now();
  try {
    const result = await runProcess(
      options.pythonBin,
      ["-I", "-c", CHILD_WRAPPER, String(memoryMb), snippetPath],
      options.scratchDir,
      timeoutMs,
    );
    const elapsed = Date.now() - started;
    const stdout = capOutput(result.stdout);
    const stderr = capOutput(result.stderr);
    let status: SandboxStatus;
    let duration = elapsed;
    if (result.timedOut) {
      status = "timeout";
      duration = Math.max(elapsed, timeoutMs);
    } else {
      status = result.exitCode === 0 ? "ok" : "error";
    }
    return {
      id: request.id,
      status,
      stdout: stdout.text,
      stderr: stderr.text,
      duration_ms: duration,
      ...(stdout.truncated ? { stdout_truncated: true } : {}),
      ...(stderr.truncated ? { stderr_truncated: true } : {}),
    };
  } catch (err) {
    // Spawn failures still produce exactly one response for the request.
    return {
      id: request.id,
      status: "error",
      stdout: "",
      stderr: `failed to run snippet: ${String(err)}`,
      duration_ms: Date.now() - started,
    };
  } finally {
    await unlink(snippetPath).catch(() => {});
  }
}

interface ProcessResult {
  stdout: Buffer;
  stderr: Buffer;
  exitCode: number | null;
  timedOut: boolean;
}

function runProcess(
  bin: string,
  args: string[],
  cwd: string,
  timeoutMs: number,
): Promise<ProcessResult> {
  return new Promise((resolve, reject) => {
    const child = spawn(bin, args, {
      cwd,
      stdio: ["ignore", "pipe", "pipe"],
      env: { PATH: process.env.PATH ?? "" },
    });
    const stdout: Buffer[] = [];
    const stderr: Buffer[] = [];
    let stdoutBytes = 0;
    let stderrBytes = 0;
    let timedOut = false;
    const capMargin = 64 * 1024 + 4096;

    const timer = setTimeout(() => {
      timedOut = true;
      child.kill("SIGKILL");
    }, timeoutMs);

    child.stdout.on("data", (chunk: Buffer) => {
      if (stdoutBytes < capMargin) {
        stdout.push(chunk);
        stdoutBytes += chunk.byteLength;
      }
    });
    child.stderr.on("data", (chunk: Buffer) => {
      if (stderrBytes < capMargin) {
        stderr.push(chunk);
        stderrBytes += chunk.byteLength;
      }
    });
    child.on("error", (err) => {
      clearTimeout(timer);
      reject(err);
    });
    child.on("close", (code) => {
      clearTimeout(timer);
      resolve({
        stdout: Buffer.concat(stdout),
        stderr: Buffer.concat(stderr),
        exitCode: code,
        timedOut,
      });
    });
  });
}
