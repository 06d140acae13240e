#!/usr/bin/env python3
"""
Version bumping script for msfem-lab.

Keeps pyproject.toml and msfem/__init__.py in step.

Usage:
    python scripts/bump_version.py patch    # 0.1.0 -> 0.1.1
    python scripts/bump_version.py minor    # 0.1.0 -> 0.2.0
    python scripts/bump_version.py major    # 0.1.0 -> 1.0.0
    python scripts/bump_version.py 0.2.5    # Set specific version
"""

import re
import sys
from pathlib import Path

PYPROJECT = Path("pyproject.toml")
PACKAGE_INIT = Path("msfem/__init__.py")


def get_current_version():
    """Get current version from pyproject.toml"""
    match = re.search(r'^version = "([^"]+)"', PYPROJECT.read_text(), flags=re.MULTILINE)
    if match:
        return match.group(1)
    raise ValueError("Could not find version in pyproject.toml")


def bump_version(current_version, bump_type):
    parts = [int(x) for x in current_version.split(".")]
    if bump_type == "major":
        parts = [parts[0] + 1, 0, 0]
    elif bump_type == "minor":
        parts = [parts[0], parts[1] + 1, 0]
    elif bump_type == "patch":
        parts[2] += 1
    else:
        if not re.fullmatch(r"\d+\.\d+\.\d+", bump_type):
            raise ValueError(f"Not a version or bump type: {bump_type}")
        return bump_type
    return ".".join(map(str, parts))


def update_version(new_version):
    content = re.sub(r'^version = "[^"]+"', f'version = "{new_version}"', PYPROJECT.read_text(), flags=re.MULTILINE)
    PYPROJECT.write_text(content)
    init = re.sub(r'__version__ = "[^"]+"', f'__version__ = "{new_version}"', PACKAGE_INIT.read_text())
    PACKAGE_INIT.write_text(init)
    print(f"Updated version to {new_version} in {PYPROJECT} and {PACKAGE_INIT}")


def main():
    if len(sys.argv) != 2:
        print(__doc__)
        sys.exit(1)

    try:
        current_version = get_current_version()
        print(f"Current version: {current_version}")
        new_version = bump_version(current_version, sys.argv[1])
        print(f"New version: {new_version}")
        update_version(new_version)
        print("\nNext steps:")
        print(f"1. git add {PYPROJECT} {PACKAGE_INIT}")
        print(f"2. git commit -m 'Bump version to {new_version}'")
        print(f"3. git tag -a v{new_version} -m 'Release version {new_version}'")
    except Exception as e:
        print(f"Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
