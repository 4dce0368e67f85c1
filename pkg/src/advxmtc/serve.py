"""Expose the built-in provider and/or a saved model over the subprocess protocol.

    python -m advxmtc.serve --embeddings emb.txt --model model.bin
"""

import argparse
import sys

from .attack import EmbeddingKnnProvider
from .dataset import load_embeddings
from .transport import serve
from .victim import load_model, score


def make_handler(provider=None, model=None):
    def handle(req):
        kind = req.get("kind")
        if kind == "candidates" and provider is not None:
            return {"candidates": provider(req["tokens"], int(req["mask_index"]), int(req["max"]))}
        if kind == "score" and model is not None:
            return {"scores": [float(s) for s in score(model, req["tokens"])]}
        raise ValueError(f"unsupported request kind {kind!r}")

    return handle


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m advxmtc.serve")
    p.add_argument("--embeddings")
    p.add_argument("--model")
    p.add_argument("--max-candidates", type=int, default=50)
    args = p.parse_args(argv)
    provider = EmbeddingKnnProvider(load_embeddings(args.embeddings), args.max_candidates) if args.embeddings else None
    model = load_model(args.model) if args.model else None
    if provider is None and model is None:
        p.error("give --embeddings and/or --model")
    serve(make_handler(provider, model), sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
