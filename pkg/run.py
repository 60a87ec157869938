from __future__ import annotations

from neused.cli import main


if __name__ == "__main__":
    raise SystemExit(main())
