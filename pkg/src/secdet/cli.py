"""Command-line client for the detection service.

Each subcommand builds the same request model the HTTP API accepts and
either POSTs it to a running server (``--server``) or dispatches to the
service layer in-process.  ``secdet serve`` starts the FastAPI app.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import service


def _overrides(args) -> service.ConfigOverrides:
    return service.ConfigOverrides(
        engine=args.engine,
        transport=args.transport,
        seed=args.seed,
        eta=args.eta,
        weights_path=getattr(args, "weights", None),
    )


def _dispatch(args, route: str, payload) -> dict:
    if args.server:
        import httpx

        r = httpx.post(f"{args.server.rstrip('/')}{route}", json=payload.model_dump(), timeout=600.0)
        r.raise_for_status()
        return r.json()
    handler = {
        "/share": service.do_share,
        "/dealer": service.do_dealer,
        "/oracle": service.do_oracle,
        "/infer": service.do_infer,
        "/compare": service.do_compare,
        "/bench": service.do_bench,
    }[route]
    return handler(payload).model_dump()


def _common(sub):
    sub.add_argument("--config", dest="config", help="pipeline config JSON")
    sub.add_argument("--transport", choices=["inproc", "tcp"])
    sub.add_argument("--seed", type=int)
    sub.add_argument("--engine", choices=["beaver", "grr3"])
    sub.add_argument("--eta", type=float)
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--server", help="base URL of a running service")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="secdet", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_share = subs.add_parser("share", help="split an image into pixel shares")
    p_share.add_argument("image")
    _common(p_share)

    p_dealer = subs.add_parser("dealer", help="write per-party randomness bundles")
    p_dealer.add_argument("--counts", help="JSON dict of kind -> count")
    _common(p_dealer)

    p_oracle = subs.add_parser("oracle", help="plaintext fixed-point inference")
    p_oracle.add_argument("image")
    p_oracle.add_argument("--weights")
    _common(p_oracle)

    p_infer = subs.add_parser("infer", help="two-party secure inference")
    p_infer.add_argument("image")
    p_infer.add_argument("--weights")
    _common(p_infer)

    p_cmp = subs.add_parser("compare", help="secure vs oracle error report")
    p_cmp.add_argument("image")
    p_cmp.add_argument("--weights")
    _common(p_cmp)

    p_bench = subs.add_parser("bench", help="protocol runtime/round/byte sweep")
    p_bench.add_argument("--sizes", default="1000,10000")
    p_bench.add_argument("--protocols", default="comp,exp,ds")
    p_bench.add_argument("--repeats", type=int, default=3)
    _common(p_bench)

    p_serve = subs.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8472)

    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        uvicorn.run(service.app, host=args.host, port=args.port)
        return 0

    ov = _overrides(args)
    if args.command == "share":
        payload = service.ShareRequest(
            image=service.ImageSource(path=args.image),
            seed=args.seed or 0,
            out_dir=args.out,
            config_path=args.config,
            overrides=ov,
        )
        result = _dispatch(args, "/share", payload)
    elif args.command == "dealer":
        payload = service.DealerRequest(
            seed=args.seed or 0,
            out_dir=args.out,
            counts=json.loads(args.counts) if args.counts else None,
            config_path=args.config,
            overrides=ov,
        )
        result = _dispatch(args, "/dealer", payload)
    elif args.command in ("oracle", "infer", "compare"):
        payload = service.InferRequest(
            image=service.ImageSource(path=args.image),
            out_dir=args.out,
            config_path=args.config,
            overrides=ov,
        )
        result = _dispatch(args, f"/{args.command}", payload)
    elif args.command == "bench":
        payload = service.BenchRequest(
            sizes=[int(s) for s in args.sizes.split(",")],
            protocols=args.protocols.split(","),
            out_dir=args.out,
            config_path=args.config,
            overrides=ov,
            repeats=args.repeats,
        )
        result = _dispatch(args, "/bench", payload)
    else:  # pragma: no cover
        parser.error(f"unknown command {args.command}")
        return 2

    json.dump(result, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
