"""Run the acceptance suite and print only the PASS/FAIL lines."""

import subprocess
import sys


def main():
    proc = subprocess.run([sys.executable, "-m", "pytest", "tests/test_acceptance.py", "-q", *sys.argv[1:]],
                          capture_output=True, text=True)
    lines = [l for l in proc.stdout.splitlines() if l.startswith("criterion ")]
    print("\n".join(lines) if lines else proc.stdout)
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
