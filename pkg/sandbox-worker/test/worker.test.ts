import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { OUTPUT_CAP_BYTES, capOutput, parseRequestLine } from "../src/protocol.js";
import { WorkerClient } from "./client.js";

let client: WorkerClient;

beforeAll(async () => {
  const started = await WorkerClient.start();
  expect(started.handshake.protocol_version).toBe("1");
  client = started.client;
});

afterAll(() => {
  client.close();
});

describe("protocol parsing", () => {
  it("accepts a well-formed request", () => {
    const parsed = parseRequestLine(
      JSON.stringify({ id: "r1", code: "print(1)", timeout_ms: 500 }),
    );
    expect(parsed.ok).toBe(true);
  });

  it("reports malformed JSON with a diagnostic", () => {
    const parsed = parseRequestLine("{nope");
    expect(parsed.ok).toBe(false);
    if (!parsed.ok) {
      expect(parsed.diagnostic).toContain("malformed JSON");
    }
  });

  it("rejects requests without code but echoes the id", () => {
    const parsed = parseRequestLine(JSON.stringify({ id: "r2" }));
    expect(parsed.ok).toBe(false);
    if (!parsed.ok) {
      expect(parsed.id).toBe("r2");
    }
  });

  it("caps output at 64 KiB and flags the cut", () => {
    const big = Buffer.alloc(OUTPUT_CAP_BYTES + 10, 0x61);
    const capped = capOutput(big);
    expect(capped.truncated).toBe(true);
    expect(Buffer.byteLength(capped.text)).toBe(OUTPUT_CAP_BYTES);
    const small = capOutput(Buffer.from("fine"));
    expect(small.truncated).toBe(false);
    expect(small.text).toBe("fine");
  });
});

describe("execution", () => {
  it("runs print(1+1) and returns stdout '2\\n' exactly", async () => {
    const response = await client.request({ id: "ok-1", code: "print(1+1)" });
    expect(response.id).toBe("ok-1");
    expect(response.status).toBe("ok");
    expect(response.stdout).toBe("2\n");
    expect(response.stderr).toBe("");
  });

  it("reports program exceptions as status error with stderr", async () => {
    const response = await client.request({
      id: "err-1",
      code: "raise ValueError('boom')",
    });
    expect(response.status).toBe("error");
    expect(String(response.stderr)).toContain("ValueError");
  });

  it("reports undefined names as errors", async () => {
    const response = await client.request({
      id: "err-2",
      code: "print(never_defined_here)",
    });
    expect(response.status).toBe("error");
    expect(String(response.stderr)).toContain("NameError");
  });

  it("kills infinite loops at the limit and reports timeout", async () => {
    const response = await client.request({
      id: "to-1",
      code: "while True: pass",
      timeout_ms: 1000,
    });
    expect(response.status).toBe("timeout");
    const duration = response.duration_ms as number;
    expect(duration).toBeGreaterThanOrEqual(1000);
    expect(duration).toBeLessThanOrEqual(1500);
  });

  it("truncates oversized stdout and flags it", async () => {
    const response = await client.request({
      id: "big-1",
      code: `print('a' * ${OUTPUT_CAP_BYTES * 2})`,
    });
    expect(response.status).toBe("ok");
    expect(Buffer.byteLength(String(response.stdout))).toBeLessThanOrEqual(
      OUTPUT_CAP_BYTES,
    );
    expect(response.stdout_truncated).toBe(true);
  });

  it("answers malformed lines with a parse diagnostic", async () => {
    client.sendRaw("{definitely not json");
    const response = JSON.parse(await client.nextLine());
    expect(response.status).toBe("error");
    expect(response.stderr).toContain("malformed JSON");
  });

  it("blocks network access inside snippets", async () => {
    const response = await client.request({
      id: "net-1",
      code: "import socket\nsocket.socket()",
    });
    expect(response.status).toBe("error");
    expect(String(response.stderr)).toContain("network access is disabled");
  });
});

describe("statelessness", () => {
  it("leaks nothing across interleaved requests with conflicting globals", async () => {
    for (let i = 0; i < 6; i += 1) {
      const setter = await client.request({
        id: `set-${i}`,
        code: `shared_state = ${i}\nprint(shared_state)`,
      });
      expect(setter.status).toBe("ok");
      expect(setter.stdout).toBe(`${i}\n`);
      const probe = await client.request({
        id: `probe-${i}`,
        code: "print('shared_state' in globals())",
      });
      expect(probe.status).toBe("ok");
      expect(probe.stdout).toBe("False\n");
    }
  });
});

describe("round trip volume", () => {
  it("serves 1,000 requests with zero id mismatches", async () => {
    const workers = await Promise.all(
      Array.from({ length: 4 }, () => WorkerClient.start()),
    );
    try {
      const perWorker = 250;
      let mismatches = 0;
      await Promise.all(
        workers.map(async ({ client: worker }, w) => {
          for (let i = 0; i < perWorker; i += 1) {
            const id = `w${w}-req-${i}`;
            const response = await worker.request({
              id,
              code: `print(${w} * 1000 + ${i})`,
            });
            if (response.id !== id) {
              mismatches += 1;
            }
            expect(response.status).toBe("ok");
            expect(response.stdout).toBe(`${w * 1000 + i}\n`);
          }
        }),
      );
      expect(mismatches).toBe(0);
    } finally {
      for (const { client: worker } of workers) {
        worker.close();
      }
    }
  });
});
