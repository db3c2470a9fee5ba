import express, { Express, Request, Response } from "express";

import { Encoder } from "./encoder";

export const MAX_PHRASE_LENGTH = 512;

export interface ServiceState {
  ready: boolean;
}

export function createApp(encoder: Encoder, state: ServiceState = { ready: true }): Express {
  const app = express();
  app.use(express.json({ limit: "4mb" }));

  app.get("/healthz", (_req: Request, res: Response) => {
    res.status(state.ready ? 200 : 503).json({
      status: state.ready ? "ok" : "loading",
      model: encoder.model,
      dim: encoder.dim,
    });
  });

  app.post("/embed", (req: Request, res: Response) => {
    if (!state.ready) {
      res.status(503).json({ error: "model is still loading" });
      return;
    }
    const phrases = req.body?.phrases;
    if (!Array.isArray(phrases) || phrases.length === 0) {
      res.status(400).json({ error: "phrases must be a non-empty array of strings" });
      return;
    }
    for (const phrase of phrases) {
      if (typeof phrase !== "string" || phrase.length === 0) {
        res.status(400).json({ error: "every phrase must be a non-empty string" });
        return;
      }
      if (phrase.length > MAX_PHRASE_LENGTH) {
        res.status(400).json({ error: `phrases must be at most ${MAX_PHRASE_LENGTH} characters` });
        return;
      }
    }
    res.json({
      vectors: encoder.embed(phrases),
      dim: encoder.dim,
      model: encoder.model,
    });
  });

  return app;
}
