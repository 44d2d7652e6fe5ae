#!/usr/bin/env python3
# Copyright (c) 2026 moeprune authors
# SPDX-License-Identifier: Apache-2.0
"""Runs the CLI end to end and validates every JSON artifact against the
shipped schemas. Usage: validate_schemas.py <cli-binary> <schema-dir>"""

import json
import pathlib
import subprocess
import sys
import tempfile

import jsonschema
from jsonschema import validators


def load_schema(schema_dir: pathlib.Path, name: str):
    with open(schema_dir / name) as fh:
        return json.load(fh)


def make_validator(schema_dir: pathlib.Path, name: str):
    schema = load_schema(schema_dir, name)
    store = {}
    for f in schema_dir.glob("*.schema.json"):
        doc = json.loads(f.read_text())
        store[doc.get("$id", f.name)] = doc
        store[f.name] = doc
    resolver = validators.RefResolver(base_uri=schema.get("$id", ""), referrer=schema,
                                      store=store)
    return validators.Draft7Validator(schema, resolver=resolver)


def run(cli, *args):
    proc = subprocess.run([cli, *args], capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"command failed ({proc.returncode}): {' '.join(args)}\n"
                         f"{proc.stdout}{proc.stderr}")


def main() -> int:
    cli, schema_dir = sys.argv[1], pathlib.Path(sys.argv[2])
    failures = 0
    with tempfile.TemporaryDirectory(prefix="moeprune_schema_") as tmp:
        work = pathlib.Path(tmp)
        toy = work / "toy"
        run(cli, "gen-toy", "--layers", "2", "--experts", "8", "--dim", "16",
            "--hidden", "8", "--out", str(toy))
        run(cli, "score", "--model", str(toy), "--layout", "qwen3-like",
            "--criterion", "aimer", "--out", str(work / "scores.json"))
        run(cli, "calibrate", "--model", str(toy), "--layout", "qwen3-like",
            "--criterion", "reap", "--tokens", "64", "--out", str(work / "reap.json"))
        run(cli, "prune", "--model", str(toy), "--scores", str(work / "scores.json"),
            "--ratio", "0.25", "--out", str(work / "pruned"))

        artifacts = [
            ("score_table.schema.json", work / "scores.json"),
            ("score_table.schema.json", work / "reap.json"),
            ("routing_stats.schema.json", work / "reap.json.stats.json"),
            ("pruning_plan.schema.json", work / "pruned" / "pruning_plan.json"),
            ("verify_report.schema.json", work / "pruned" / "verify_report.json"),
        ]
        for schema_name, artifact in artifacts:
            validator = make_validator(schema_dir, schema_name)
            with open(artifact) as fh:
                doc = json.load(fh)
            errors = list(validator.iter_errors(doc))
            tag = f"{artifact.name} vs {schema_name}"
            if errors:
                failures += 1
                print(f"[FAIL] {tag}: {errors[0].message}")
            else:
                print(f"[ok] {tag}")

        # the embedded layout also validates standalone
        layout_validator = make_validator(schema_dir, "layout.schema.json")
        with open(work / "scores.json") as fh:
            layout = json.load(fh)["layout"]
        if list(layout_validator.iter_errors(layout)):
            failures += 1
            print("[FAIL] embedded layout vs layout.schema.json")
        else:
            print("[ok] embedded layout vs layout.schema.json")
    return failures


if __name__ == "__main__":
    sys.exit(main())
