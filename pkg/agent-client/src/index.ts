export { AgentSession } from "./client.js";
export { runMockAgent } from "./mockAgent.js";
export { nextToken, oracleRun, verifyStream } from "./oracle.js";
export * from "./types.js";
