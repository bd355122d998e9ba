#!/usr/bin/env python3
"""
Video Edit Launcher
Puts the project on the path and hands the command line to the orchestrator
"""

import sys
from pathlib import Path

project_path = Path(__file__).parent
sys.path.insert(0, str(project_path))


def main() -> int:
    """Main entry point for the command-line surface"""
    if not (project_path / "src").exists():
        print("❌ Error: src directory not found!")
        return 2
    try:
        from src.main_orchestrator import main as run_orchestrator
    except ImportError as e:
        print(f"❌ Import error: {e}")
        print("Please install the packages listed in requirements.txt.")
        return 2
    return run_orchestrator(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
