"""Command-line interface: synth, build, match, eval.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 build or
match failure.  Failures print one machine-parsable line on stderr:
``error: <category>: <reason>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .correspondence import CorrespondenceParams
from .errors import ConfigError, DataFormatError, EqGraphError, ModelFormatError
from .graphbuild import BuildParams, build_model
from .io import (
    load_ensembles,
    load_model,
    read_labels_csv,
    read_matrix_csv,
    save_model,
    worker_count,
    write_cmc_csv,
    write_descriptor_records,
    write_matrix_csv,
    write_roc_csv,
    write_summary_json,
    write_truth_json,
)
from .matching import MatchParams, dissimilarity_matrix
from .metrics import LabeledMatrix, cmc_curve, roc_curve, vr_at_far
from .pca import pca_fit, pca_project
from .synth import WorldConfig, generate_world
from .types import Collection, Descriptor, Ensemble

USAGE_EXIT = 1
DATA_EXIT = 2
RUN_EXIT = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="eqgraph", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic descriptor world")
    p_synth.add_argument("--config", type=Path, help="world config JSON (defaults when omitted)")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", type=Path, required=True, help="descriptor JSONL output")
    p_synth.add_argument("--truth", type=Path, required=True, help="ground-truth JSON output")

    p_build = sub.add_parser("build", help="train a model from descriptor JSONL")
    p_build.add_argument("--train", type=Path, required=True)
    p_build.add_argument("--out", type=Path, required=True)
    p_build.add_argument("--pca-k", type=int, default=20)
    p_build.add_argument("--diameter", type=int, default=2)
    p_build.add_argument("--e-th", type=float, default=4.0)
    p_build.add_argument("--lambda-min", type=float, default=0.2)
    p_build.add_argument("--hub", type=str, default=None, help="link all collections to this subject only")

    p_match = sub.add_parser("match", help="score probes against a gallery")
    p_match.add_argument("--model", type=Path, required=True)
    p_match.add_argument("--probes", type=Path, required=True)
    p_match.add_argument("--gallery", type=Path, required=True)
    p_match.add_argument("--out", type=Path, required=True, help="dissimilarity CSV output")
    p_match.add_argument("--top-n", type=int, default=40)
    p_match.add_argument("--vote-k", type=int, default=9)
    p_match.add_argument("--refine-iters", type=int, default=6)
    p_match.add_argument(
        "--plain",
        action="store_true",
        help="disable the graph; score by direct descriptor distances only",
    )

    p_eval = sub.add_parser("eval", help="CMC/ROC evaluation of a dissimilarity CSV")
    p_eval.add_argument("--dissim", type=Path, required=True)
    p_eval.add_argument("--probe-labels", type=Path, required=True)
    p_eval.add_argument("--gallery-labels", type=Path, required=True)
    p_eval.add_argument("--cmc", type=Path, required=True)
    p_eval.add_argument("--roc", type=Path, required=True)
    p_eval.add_argument("--summary", type=Path, required=True)
    return parser


def _load_world_config(path: Path | None) -> WorldConfig:
    if path is None:
        return WorldConfig()
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return WorldConfig(**raw)


def _cmd_synth(args) -> None:
    config = _load_world_config(args.config)
    collections, truth = generate_world(config, args.seed)
    ensembles = [e for c in collections for e in c.ensembles]
    write_descriptor_records(args.out, ensembles)
    write_truth_json(args.truth, truth)


def _project_collections(collections, basis) -> list[Collection]:
    projected = []
    for c in collections:
        ensembles = []
        for e in c.ensembles:
            descriptors = tuple(
                Descriptor(
                    vector=pca_project(d.vector, basis),
                    keypoint=d.keypoint,
                    descriptor_id=d.descriptor_id,
                    ensemble_id=d.ensemble_id,
                    collection_id=d.collection_id,
                )
                for d in e.descriptors
            )
            ensembles.append(
                Ensemble(
                    ensemble_id=e.ensemble_id,
                    subject_id=e.subject_id,
                    expression=e.expression,
                    descriptors=descriptors,
                )
            )
        projected.append(
            Collection(collection_id=c.collection_id, subject_id=c.subject_id, ensembles=tuple(ensembles))
        )
    return projected


def _cmd_build(args) -> None:
    collections = load_ensembles(args.train)
    vectors = np.stack(
        [d.vector for c in collections for e in c.ensembles for d in e.descriptors]
    )
    if args.pca_k < 1:
        raise ConfigError("--pca-k must be >= 1")
    try:
        basis = pca_fit(vectors, k=args.pca_k)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
    collections = _project_collections(collections, basis)
    params = BuildParams(
        diameter_threshold=args.diameter,
        lambda_min=args.lambda_min,
        hub=args.hub,
        correspondence=CorrespondenceParams(e_th=args.e_th),
    )
    model = build_model(collections, params, pca=basis)
    save_model(model, args.out)


def _load_side(path: Path, model) -> list[Ensemble]:
    collections = load_ensembles(path)
    if model.pca is not None:
        if collections[0].dim != model.pca.d_raw:
            raise DataFormatError(
                f"{path}: descriptor dimension {collections[0].dim} does not match "
                f"the model's input dimension {model.pca.d_raw}"
            )
        collections = _project_collections(collections, model.pca)
    elif collections[0].dim != model.dim:
        raise DataFormatError(
            f"{path}: descriptor dimension {collections[0].dim} does not match "
            f"the model dimension {model.dim}"
        )
    return [e for c in collections for e in c.ensembles]


def _cmd_match(args) -> None:
    model = load_model(args.model)
    probes = _load_side(args.probes, model)
    galleries = _load_side(args.gallery, model)
    params = MatchParams(
        vote_k=args.vote_k, refine_iters=args.refine_iters, top_n=args.top_n
    )
    matrix = dissimilarity_matrix(
        probes,
        galleries,
        model,
        params=params,
        plain=args.plain,
        n_jobs=worker_count(),
    )
    write_matrix_csv(
        args.out,
        matrix,
        [e.ensemble_id for e in probes],
        [e.ensemble_id for e in galleries],
    )


def _cmd_eval(args) -> None:
    matrix, probe_ids, gallery_ids = read_matrix_csv(args.dissim)
    probe_labels = read_labels_csv(args.probe_labels)
    gallery_labels = read_labels_csv(args.gallery_labels)
    try:
        probe_subjects = tuple(probe_labels[p] for p in probe_ids)
        gallery_subjects = tuple(gallery_labels[g] for g in gallery_ids)
    except KeyError as exc:
        raise DataFormatError(f"missing label for scan {exc}") from exc
    try:
        lm = LabeledMatrix(matrix, probe_subjects, gallery_subjects)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
    rates = cmc_curve(lm, max_rank=len(gallery_ids))
    curve = roc_curve(lm)
    write_cmc_csv(args.cmc, rates)
    write_roc_csv(args.roc, curve)
    write_summary_json(
        args.summary,
        {"rank1": float(rates[0]), "vr_at_far": vr_at_far(curve, 0.001)},
    )


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    commands = {
        "synth": _cmd_synth,
        "build": _cmd_build,
        "match": _cmd_match,
        "eval": _cmd_eval,
    }
    try:
        commands[args.command](args)
    except (DataFormatError, ModelFormatError, ConfigError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DATA_EXIT
    except EqGraphError as exc:
        print(f"error: run: {exc}", file=sys.stderr)
        return RUN_EXIT
    except OSError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DATA_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
