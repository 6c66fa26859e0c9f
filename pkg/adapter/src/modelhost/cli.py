"""Entry point: run the adapter service."""

from __future__ import annotations

import click

from .config import AdapterConfig
from .service import serve


@click.group()
def main():
    """Model-backed backend-protocol service."""


@main.command("serve")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
def serve_command(config_path, host, port):
    config = AdapterConfig.load(config_path)
    if host:
        config.host = host
    if port:
        config.port = port
    serve(config)


if __name__ == "__main__":
    main()
