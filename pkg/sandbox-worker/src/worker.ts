/**
 * Long-lived worker entry point.
 *
 * Reads one JSON request per stdin line, executes snippets one at a time in
 * fresh interpreter processes, and writes one JSON response per stdout line.
 * The first line written is the protocol handshake. Concurrency comes from
 * running a pool of workers, never from a single worker.
 */

import { mkdtempSync } from "node:fs";
import os from "node:os";
import path from "node:path";
import readline from "node:readline";

import { errorResponse, handshakeLine, parseRequestLine } from "./protocol.js";
import { RunnerOptions, executeRequest } from "./runner.js";

interface CliFlags {
  timeoutDefaultMs: number;
  memoryDefaultMb: number;
  scratchDir: string | null;
  pythonBin: string;
}

function parseFlags(argv: string[]): CliFlags {
  const flags: CliFlags = {
    timeoutDefaultMs: 10_000,
    memoryDefaultMb: 512,
    scratchDir: null,
    pythonBin: "python3",
  };
  for (let i = 0; i < argv.length; i += 1) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case "--timeout-default":
        flags.timeoutDefaultMs = Number(value);
        i += 1;
        break;
      case "--memory-default":
        flags.memoryDefaultMb = Number(value);
        i += 1;
        break;
      case "--scratch-dir":
        flags.scratchDir = value;
        i += 1;
        break;
      case "--python":
        flags.pythonBin = value;
        i += 1;
        break;
      default:
        process.stderr.write(`unknown flag: ${flag}\n`);
        process.exit(2);
    }
  }
  if (!Number.isFinite(flags.timeoutDefaultMs) || flags.timeoutDefaultMs <= 0) {
    process.stderr.write("--timeout-default must be a positive number of ms\n");
    process.exit(2);
  }
  if (!Number.isFinite(flags.memoryDefaultMb) || flags.memoryDefaultMb <= 0) {
    process.stderr.write("--memory-default must be a positive number of MiB\n");
    process.exit(2);
  }
  return flags;
}

async function main(): Promise<void> {
  const flags = parseFlags(process.argv.slice(2));
  const options: RunnerOptions = {
    pythonBin: flags.pythonBin,
    scratchDir:
      flags.scratchDir ?? mkdtempSync(path.join(os.tmpdir(), "sandbox-worker-")),
    timeoutDefaultMs: flags.timeoutDefaultMs,
    memoryDefaultMb: flags.memoryDefaultMb,
  };

  process.stdout.write(handshakeLine() + "\n");

  const lines = readline.createInterface({ input: process.stdin, terminal: false });
  // for-await keeps requests strictly sequential: one in flight per worker.
  for await (const line of lines) {
    if (!line.trim()) {
      continue;
    }
    const parsed = parseRequestLine(line);
    const response = parsed.ok
      ? await executeRequest(parsed.request, options)
      : errorResponse(parsed.id, parsed.diagnostic);
    process.stdout.write(JSON.stringify(response) + "\n");
  }
}

main().catch((err) => {
  process.stderr.write(`fatal: ${String(err)}\n`);
  process.exit(1);
});
