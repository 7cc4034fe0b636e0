"""Launcher: `refserver --model <id> --port <p>`.

`--model tiny-char` serves the built-in random-weight character model (no
downloads); any other value is treated as a Hugging Face model id.
"""

from __future__ import annotations

import argparse
import sys

from .adapters import ServerConfig, build_adapter
from .app import create_app, create_unavailable_app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="refserver", description=__doc__)
    parser.add_argument("--model", default="tiny-char")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-context", type=int, default=256)
    parser.add_argument("--default-top-n", type=int, default=10)
    args = parser.parse_args(argv)

    config = ServerConfig(
        model=args.model,
        device=args.device,
        max_context=args.max_context,
        default_top_n=args.default_top_n,
        port=args.port,
    )
    try:
        app = create_app(build_adapter(config), default_top_n=config.default_top_n)
    except Exception as exc:  # noqa: BLE001 - serve 503s instead of dying
        print(f"model load failed, serving 503s: {exc}", file=sys.stderr)
        app = create_unavailable_app(str(exc))

    import uvicorn

    uvicorn.run(app, host=args.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
