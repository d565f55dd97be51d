"""Command-line entrypoint.

`sdeid.py` is the module users run (`uv run sdeid.py full ...`), while the
implementation lives in the `sdeid/` directory. Setting `__path__` lets this
module act as the package so that `import sdeid.<submodule>` works.
"""

from __future__ import annotations

from pathlib import Path

# Allow importing `sdeid.*` modules from the `sdeid/` directory.
__path__ = [str(Path(__file__).with_name("sdeid"))]

from sdeid.cli import create_cli  # noqa: E402

main = create_cli()


if __name__ == "__main__":
    main()
