/**
 * The serving engine's fixed public token function, reimplemented here so the
 * client can verify transcripts independently of the server.
 *
 *   msg    = "tokgen1" + le64_signed(seed) + le32(version)
 *            + le32(len(context)) + le32(token)...
 *   token  = be_uint64(sha256(msg)[0..8]) mod vocabSize
 */

import { createHash } from "node:crypto";
import { TokenId } from "./types.js";

export function nextToken(
  context: readonly TokenId[],
  seed: number | bigint,
  version: number,
  vocabSize: number,
): TokenId {
  const head = Buffer.alloc(7 + 8 + 4 + 4);
  head.write("tokgen1", 0, "ascii");
  head.writeBigInt64LE(BigInt(seed), 7);
  head.writeUInt32LE(version >>> 0, 15);
  head.writeUInt32LE(context.length >>> 0, 19);
  const body = Buffer.alloc(4 * context.length);
  for (let i = 0; i < context.length; i++) {
    body.writeUInt32LE(context[i] >>> 0, 4 * i);
  }
  const digest = createHash("sha256").update(head).update(body).digest();
  return Number(digest.readBigUInt64BE(0) % BigInt(vocabSize));
}

/** Uninterrupted reference run at a fixed version. */
export function oracleRun(
  input: readonly TokenId[],
  seed: number | bigint,
  version: number,
  maxNewTokens: number,
  vocabSize: number,
  prefix: readonly TokenId[] = [],
): TokenId[] {
  const produced: TokenId[] = [...prefix];
  while (produced.length < maxNewTokens) {
    produced.push(nextToken([...input, ...produced], seed, version, vocabSize));
  }
  return produced.slice(prefix.length);
}

/**
 * Verify a response against per-token version tags: every token must be what
 * the engine's recurrence produces at the version that generated it.
 */
export function verifyStream(
  input: readonly TokenId[],
  output: readonly TokenId[],
  versions: readonly number[],
  seed: number | bigint,
  vocabSize: number,
): boolean {
  if (output.length !== versions.length) return false;
  for (let i = 0; i < output.length; i++) {
    const expect = nextToken([...input, ...output.slice(0, i)], seed, versions[i], vocabSize);
    if (output[i] !== expect) return false;
  }
  return true;
}
