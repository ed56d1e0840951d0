/**
 * NON-NORMATIVE demo only. The protocol speaks token ids; this toy
 * whitespace "tokenizer" exists purely so a human can type something at a
 * running stack. It is not part of the client API and nothing depends on it.
 *
 * Usage: ts-node examples/whitespace_demo.ts http://127.0.0.1:8775 "hello world"
 */

import { AgentSession } from "../src/client.js";

const VOCAB = 4096;

export function toyEncode(text: string): number[] {
  return text
    .split(/\s+/)
    .filter(Boolean)
    .map((word) => {
      let h = 2166136261;
      for (const ch of word) {
        h = (h ^ ch.charCodeAt(0)) * 16777619;
        h >>>= 0;
      }
      return h % VOCAB;
    });
}

async function main() {
  const [base, text] = process.argv.slice(2);
  if (!base || !text) {
    console.error("usage: whitespace_demo <base-url> <text>");
    process.exit(2);
  }
  const session = new AgentSession({ baseUrl: base, sessionId: `demo-${Date.now()}` });
  const tokens = toyEncode(text);
  console.log("input ids:", tokens);
  const out = await session.chat(tokens, { maxNewTokens: 8 });
  console.log("output ids:", out);
}

if (process.argv[1]?.endsWith("whitespace_demo.ts")) {
  main().catch((err) => {
    console.error(err);
    process.exit(1);
  });
}
