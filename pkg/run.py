"""Launcher for the pegnn command line.

Loads `.env` from the repository root, makes sure the run registry exists
and forwards the remaining arguments to ``pegnn.cli``.

Copyright (c) Bryn Gwalad 2025
"""

import sys

from dotenv import load_dotenv

# Load .env from repo root so the registry and config overrides pick it up
load_dotenv()

from utils.database import init_db

try:
    from pegnn.cli import main as cli_main
except Exception as exc:
    raise RuntimeError(
        "Failed to import the pegnn package. Ensure project root is on PYTHONPATH"
    ) from exc


def main() -> int:
    """Initialize the registry and run one CLI command.

    Environment variables:
    - PEGNN_REGISTRY_FILE: run registry SQLite file (default database/runs.db)
    - LOG_LEVEL: logging level (default INFO)
    """
    init_db()
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
