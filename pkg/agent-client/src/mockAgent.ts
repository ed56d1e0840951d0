/**
 * Scripted multi-turn driver: each response feeds the next turn's input, and
 * a turn's branches open parallel continuations from the same prefix on one
 * session. A failed chat aborts its branch only; sibling branches and the
 * session itself continue.
 */

import { AgentSession } from "./client.js";
import { Exchange, GenParams, TokenId, Transcript, TurnSpec } from "./types.js";

const DEFAULT_PARAMS: GenParams = { maxNewTokens: 16, seed: 0 };

export async function runMockAgent(
  session: AgentSession,
  script: TurnSpec[],
  defaults: GenParams = DEFAULT_PARAMS,
): Promise<Transcript> {
  const transcript: Transcript = { exchanges: [], errors: [] };
  await runBranch(session, script, [], "", defaults, transcript);
  // deterministic ordering regardless of branch completion order
  transcript.exchanges.sort((a, b) => a.path.localeCompare(b.path));
  transcript.errors.sort((a, b) => a.path.localeCompare(b.path));
  return transcript;
}

async function runBranch(
  session: AgentSession,
  turns: TurnSpec[],
  context: TokenId[],
  prefix: string,
  defaults: GenParams,
  transcript: Transcript,
): Promise<void> {
  let ctx = context;
  for (let i = 0; i < turns.length; i++) {
    const turn = turns[i];
    const path = prefix === "" ? `t${i}` : `${prefix}.t${i}`;
    const input = [...ctx, ...turn.user];
    let output: TokenId[];
    try {
      output = await session.chat(input, { ...defaults, ...turn.params });
    } catch (err) {
      transcript.errors.push({ path, error: String(err) });
      return; // abort this branch, not the session
    }
    const exchange: Exchange = { path, input, output };
    transcript.exchanges.push(exchange);
    ctx = [...input, ...output];

    if (turn.branches && turn.branches.length > 0) {
      await Promise.all(
        turn.branches.map((branch, b) =>
          runBranch(session, branch, ctx, `${path}.b${b}`, defaults, transcript),
        ),
      );
    }
  }
}
