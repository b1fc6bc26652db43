"""
Test Suite: FMM Engine
======================

This test suite covers the particle interaction engine:
- Kernels and direct-summation oracle
- Expansions, tree and traversal
- Serial, periodic and distributed evaluation
- Engine acceptance (accuracy, coverage, periodic, distributed, precision)

Usage:
    python tests/test_suite_engine.py
    python tests/test_suite_engine.py --full-scale
"""

import sys
import subprocess
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


def run_engine_tests(extra_args=()):
    """
    Run all engine tests, one pytest process per file.
    """
    print("\n" + "="*80)
    print("FMM ENGINE TEST SUITE")
    print("="*80)
    print("\nThis suite includes:")
    print("  1. Kernels and direct summation")
    print("  2. Expansions, tree construction and traversal")
    print("  3. Message layer, partitioning and LET exchange")
    print("  4. Engine acceptance")
    print("\n" + "="*80 + "\n")

    test_files = [
        "tests/unit/test_model.py",
        "tests/unit/test_expansion.py",
        "tests/unit/test_tree_traversal.py",
        "tests/unit/test_engine.py",
        "tests/unit/test_comm_partition.py",
        "tests/unit/test_perf.py",
        "tests/functional/test_fmm_acceptance.py",
    ]

    for test_file in test_files:
        test_path = project_root / test_file

        if not test_path.exists():
            print(f"[WARNING] Test file not found: {test_file}")
            continue

        print(f"\n{'='*80}")
        print(f"Running: {test_file}")
        print(f"{'='*80}\n")

        result = subprocess.run(
            [sys.executable, "-m", "pytest", str(test_path), *extra_args],
            cwd=str(project_root),
            capture_output=False
        )

        if result.returncode != 0:
            print(f"\n[ERROR] Test failed: {test_file}")
            return False
        else:
            print(f"\n[SUCCESS] Test passed: {test_file}")

    print("\n" + "="*80)
    print("FMM ENGINE TEST SUITE COMPLETED SUCCESSFULLY")
    print("="*80 + "\n")
    return True


if __name__ == "__main__":
    success = run_engine_tests(sys.argv[1:])
    sys.exit(0 if success else 1)
