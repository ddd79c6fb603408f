#!/usr/bin/env python3
"""
Validate damping-lab output directories: every run must be self-describing.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from damping_lab.utils import config_hash  # noqa: E402

REQUIRED_MANIFEST_KEYS = ('command', 'seed', 'version', 'config_hash', 'artifacts')


class RunValidator:
    def __init__(self):
        self.issues = []

    def validate_run(self, run_dir):
        """Validate a single output directory."""
        self.issues = []
        run_dir = Path(run_dir)

        manifest = self._load(run_dir / 'manifest.json')
        config = self._load(run_dir / 'config.json')
        if manifest is None:
            return self.issues

        self._check_manifest(manifest)
        self._check_artifacts(run_dir, manifest)
        if config is not None:
            self._check_hash(manifest, config)
        return self.issues

    def _load(self, path):
        if not path.exists():
            self.issues.append(f"Missing {path.name}")
            return None
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            self.issues.append(f"{path.name}: invalid JSON: {e}")
            return None

    def _check_manifest(self, manifest):
        for key in REQUIRED_MANIFEST_KEYS:
            if key not in manifest:
                self.issues.append(f"manifest.json: missing '{key}'")
        if not isinstance(manifest.get('artifacts', []), list):
            self.issues.append("manifest.json: 'artifacts' should be a list")

    def _check_artifacts(self, run_dir, manifest):
        for name in manifest.get('artifacts', []):
            path = run_dir / name
            if not path.exists():
                self.issues.append(f"Listed artifact missing: {name}")
            elif path.stat().st_size == 0:
                self.issues.append(f"Listed artifact is empty: {name}")
        listed = set(manifest.get('artifacts', [])) | {'manifest.json'}
        for path in sorted(run_dir.iterdir()):
            if path.is_file() and path.name not in listed:
                self.issues.append(f"Unlisted file: {path.name}")

    def _check_hash(self, manifest, config):
        if manifest.get('config_hash') != config_hash(config):
            self.issues.append("config_hash does not match config.json")


def validate_runs_in_directory(directory):
    """Validate every run (any directory holding a manifest.json) below directory."""
    validator = RunValidator()
    results = {}
    for manifest in sorted(Path(directory).rglob('manifest.json')):
        issues = validator.validate_run(manifest.parent)
        if issues:
            results[str(manifest.parent)] = issues
    return results


def main(argv=None):
    parser = argparse.ArgumentParser(description='Validate damping-lab output directories')
    parser.add_argument('path', nargs='?', default='runs/',
                        help='Run directory or a directory of runs (default: runs/)')
    args = parser.parse_args(argv)

    path = Path(args.path)
    if not path.exists():
        print(f"❌ Path '{path}' does not exist")
        return 1

    if (path / 'manifest.json').exists():
        results = {str(path): RunValidator().validate_run(path)}
        results = {k: v for k, v in results.items() if v}
    else:
        results = validate_runs_in_directory(path)

    if results:
        print("Validation issues found:\n")
        for run_dir, issues in results.items():
            print(f"{run_dir}:")
            for issue in issues:
                print(f"  ⚠️  {issue}")
            print()
        return 1

    print("✅ All runs are self-describing")
    return 0


if __name__ == '__main__':
    exit(main())
