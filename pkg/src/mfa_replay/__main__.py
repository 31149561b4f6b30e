"""
Entry point for `python -m mfa_replay` and the `mfa-replay` script.

    python -m mfa_replay run-sequence --recipe toy
    python -m mfa_replay adapt --recipe toy --domain 2
"""

import sys


def main() -> None:
    # Imported here, not at the top, so importing this module stays cheap
    from mfa_replay.cli import main as cli_main

    sys.exit(cli_main())


if __name__ == "__main__":
    main()
