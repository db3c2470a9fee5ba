import { createApp } from "./app";
import { TokenHashEncoder } from "./encoder";

const port = Number(process.env.PORT ?? 8876);
const namespace = process.env.EMBED_MODEL ?? "all-MiniLM-L6-v2";

const state = { ready: false };
const encoder = new TokenHashEncoder(namespace);
const app = createApp(encoder, state);

app.listen(port, () => {
  state.ready = true;
  console.log(`embed-service listening on :${port} (model=${encoder.model}, dim=${encoder.dim})`);
});
