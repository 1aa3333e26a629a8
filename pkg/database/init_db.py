"""Run registry initialization helper.

Creates the SQLite run registry (``PEGNN_REGISTRY_FILE``, default
``database/runs.db``) and emits its SQL DDL into ``database/schema.sql``.

Copyright (c) Bryn Gwalad 2025
"""

from __future__ import annotations
import sys
from pathlib import Path

# Ensure project root is on sys.path so `from pegnn import models` works when
# running this script directly (python database/init_db.py).
ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from sqlmodel import SQLModel
from sqlalchemy.schema import CreateTable
from dotenv import load_dotenv

# Load environment variables from .env (so this script honors .env settings)
load_dotenv()

from pegnn import models  # noqa: F401 - models are registered via SQLModel metadata
from utils.database import get_engine, registry_file


def main(schema_path: Path = Path("database") / "schema.sql") -> None:
    """Create the registry and emit SQL DDL."""
    print(f"Using registry file: {registry_file()}")
    engine = get_engine()

    print("Creating tables...")
    SQLModel.metadata.create_all(engine)
    print("Tables created.")

    print(f"Writing SQL DDL to {schema_path}")
    schema_path.parent.mkdir(parents=True, exist_ok=True)
    with open(schema_path, "w", encoding="utf-8") as f:
        for table in SQLModel.metadata.sorted_tables:
            ddl = str(CreateTable(table).compile(engine))
            f.write(ddl)
            f.write(";\n\n")

    print("Done.\n")


if __name__ == "__main__":
    main()
