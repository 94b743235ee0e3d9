"""Command line front end: serve the models or generate fixtures offline."""

import argparse
import sys

from .backends import DeterministicBackend
from .fixtures import fixture_gen
from .service import ModelService, make_server


def _backend_from(args) -> DeterministicBackend:
    return DeterministicBackend(
        seed=args.seed, image_dim=args.image_dim, text_dim=args.text_dim
    )


def _add_backend_flags(sub) -> None:
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--image-dim", type=int, default=768)
    sub.add_argument("--text-dim", type=int, default=768)


def cmd_serve(args) -> int:
    service = ModelService(backend=_backend_from(args))
    server = make_server(service, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port} (Ctrl-C stops)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_fixture_gen(args) -> int:
    result = fixture_gen(args.manifest, args.out, backend=_backend_from(args))
    print(f"image fixture {result.image_fixture} ({result.image_records} records)")
    print(f"text fixture  {result.text_fixture} ({result.text_records} records)")
    print(f"dep fixture   {result.dep_fixture} ({result.sentences} sentences)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="model-server", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    serve = subs.add_parser("serve", help="run the HTTP model service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8801)
    _add_backend_flags(serve)
    serve.set_defaults(func=cmd_serve)

    gen = subs.add_parser("fixture-gen", help="precompute fixtures for a dataset manifest")
    gen.add_argument("--manifest", required=True, help="dataset manifest JSON")
    gen.add_argument("--out", required=True, help="output directory for fixture files")
    _add_backend_flags(gen)
    gen.set_defaults(func=cmd_fixture_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
