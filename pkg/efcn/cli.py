"""Command line interface: ``efcn <subcommand> [options]``.

Every subcommand reads the same JSON run configuration (``--config``); command line
options override the matching configuration values. Failures are reported as one
JSON line on stderr and a nonzero exit code (see ``efcn.errors``).
"""

import argparse
import dataclasses
import json
import logging
import sys
import typing as T
from pathlib import Path

import numpy as np
import pandas as pd

from .config import RunConfig, load_config
from .data import (
    SegDataset,
    gen_synthetic,
    load_dataset,
    render_assignment,
    render_labels,
    save_mask,
    save_ppm,
    save_tensor,
)
from .errors import (
    IO_EXIT_CODE,
    UNEXPECTED_EXIT_CODE,
    ConfigurationError,
    EFCNError,
    GradientCheckError,
)
from .frame import ActList, ClassSet, Frame, act_list_for_policy, build_act_list
from .heads import HEAD_KINDS
from .metrics import (
    SegResult,
    calibration,
    evaluate,
    novelty_stats,
    sweep_gamma,
)
from .model import EFCNModel, load_checkpoint, save_checkpoint
from .training import grad_check, train
from .utility import OwaWeights, UtilityTable, tdi

logger = logging.getLogger(__name__)

OWA_TABLES = ("weights", "extended", "soft", "all")
_ACT_KEYWORDS = ("singletons", "pairs", "omega", "all")


def main(argv: T.Optional[T.Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config)
        args.func(args, config)
    except EFCNError as err:
        return _report_error(err, err.exit_code)
    except OSError as err:
        return _report_error(err, IO_EXIT_CODE)
    except Exception as err:
        return _report_error(err, UNEXPECTED_EXIT_CODE)
    return 0


def _configure_logging(verbose: int, quiet: bool):
    if quiet:
        level = logging.ERROR
    elif verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _report_error(err: Exception, exit_code: int) -> int:
    logger.error(f"{type(err).__name__}: {err}")
    logger.debug("Traceback", exc_info=err)
    line = {"error": type(err).__name__, "exit_code": exit_code, "message": str(err)}
    print(json.dumps(line), file=sys.stderr)
    return exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efcn", description="Evidential FCN segmentation with set-valued outputs"
    )
    parser.add_argument("-c", "--config", type=Path, help="JSON run configuration")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", type=Path, help="dataset directory")
    synth.add_argument("--count", type=int)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--unknown-classes", type=int)
    synth.set_defaults(func=cmd_synth)

    training = commands.add_parser("train", help="train a model on a dataset")
    training.add_argument("--dataset", type=Path)
    training.add_argument("--checkpoint", type=Path)
    training.add_argument("--history", type=Path, help="history CSV")
    training.add_argument("--head", choices=HEAD_KINDS)
    training.add_argument("--epochs", type=int)
    training.add_argument("--progress", action="store_true")
    training.set_defaults(func=cmd_train)

    predict = commands.add_parser("predict", help="write assigned sets and BetP maps")
    _add_inference_arguments(predict)
    predict.add_argument("--out", type=Path, help="prediction directory")
    predict.set_defaults(func=cmd_predict)

    evaluation = commands.add_parser("evaluate", help="PU, UIoU, ECE and novelty")
    _add_inference_arguments(evaluation)
    evaluation.add_argument("--out", type=Path, help="metrics CSV")
    evaluation.add_argument(
        "--gamma-sweep",
        action="store_true",
        help="also decide and evaluate over the configured gamma grid",
    )
    evaluation.set_defaults(func=cmd_evaluate)

    calibrate = commands.add_parser("calibrate", help="reliability data")
    _add_inference_arguments(calibrate)
    calibrate.add_argument("--out", type=Path, help="reliability CSV")
    calibrate.add_argument(
        "--plot", type=Path, nargs="?", const=True, help="reliability diagram (PNG)"
    )
    calibrate.set_defaults(func=cmd_calibrate)

    owa = commands.add_parser("owa", help="print OWA weights and utility tables")
    owa.add_argument("--gamma", type=float)
    owa.add_argument("--m", type=int, default=3, help="number of classes")
    owa.add_argument(
        "--acts",
        default="singletons,pairs,omega",
        help=f"comma separated keywords {_ACT_KEYWORDS} or sets such as 1+2",
    )
    owa.add_argument(
        "--soft-labels", help="labels besides the singletons (same syntax as --acts)"
    )
    owa.add_argument("--table", choices=OWA_TABLES, default="all")
    owa.set_defaults(func=cmd_owa)

    check = commands.add_parser("gradcheck", help="finite-difference gradient check")
    check.add_argument("--dataset", type=Path, help="default: a fresh synthetic batch")
    check.add_argument("--images", type=int, default=2)
    check.add_argument("--samples", type=int, default=200)
    check.add_argument("--tolerance", type=float, default=1e-4)
    check.add_argument("--head", choices=HEAD_KINDS)
    check.set_defaults(func=cmd_gradcheck)
    return parser


def _add_inference_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--dataset", type=Path)
    parser.add_argument("--split", choices=("train", "val", "test"), default="test")
    parser.add_argument("--gamma", type=float)


def _output_dir(config: RunConfig) -> Path:
    path = Path(config.paths.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _check_frame(config: RunConfig, dataset: SegDataset) -> Frame:
    if dataset.frame != config.build_frame():
        logger.warning(
            f"Dataset frame {dataset.frame} differs from the configured frame; "
            f"using the dataset frame"
        )
    return dataset.frame


def cmd_synth(args, config: RunConfig):
    data = config.data
    dataset = gen_synthetic(
        config.build_frame(),
        count=args.count if args.count is not None else data.count,
        size=tuple(data.size),
        seed=args.seed if args.seed is not None else config.seed,
        boundary_width=data.boundary_width,
        noise_sigma=data.noise_sigma,
        unknown_classes=(
            args.unknown_classes
            if args.unknown_classes is not None
            else data.unknown_classes
        ),
        unknown_probability=data.unknown_probability,
        split=data.split,
    )
    dataset.save(args.out or config.paths.dataset)


def cmd_train(args, config: RunConfig):
    dataset = load_dataset(args.dataset or config.paths.dataset)
    frame = _check_frame(config, dataset)
    images = dataset.images("train")
    labels = dataset.labels("train")
    architecture = config.build_architecture()
    architecture.validate(*images.shape[1:3])

    soft_labels = dataset.soft_labels("train") + config.extra_soft_labels()
    acts = act_list_for_policy(frame, config.acts.policy, soft_labels)
    table = UtilityTable.build(frame, acts, config.utility.gamma, config.base_utilities())
    model = EFCNModel.initialize(
        frame,
        architecture,
        head_kind=args.head or config.ds_layer.head,
        n_prototypes=config.ds_layer.count(frame.M),
        seed=config.seed,
        dtype=np.dtype(config.training.dtype).type,
        soft_labels=soft_labels,
    )
    cfg = config.train_config()
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    logger.info(
        f"Training {model.head_kind} model on {images.shape[0]} images, "
        f"{len(acts)} acts, gamma={cfg.gamma}"
    )
    model, history = train(model, images, labels, table, cfg, progress=args.progress)

    checkpoint = Path(args.checkpoint or config.paths.checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint, model)
    history_path = args.history or _output_dir(config) / "history.csv"
    history.to_frame().to_csv(history_path, index=False)
    logger.info(f"Wrote {checkpoint} and {history_path}")


class _Inference(T.NamedTuple):
    model: EFCNModel
    dataset: SegDataset
    betp: np.ndarray
    labels: np.ndarray
    table: UtilityTable


def _run_inference(args, config: RunConfig) -> _Inference:
    model = load_checkpoint(args.checkpoint or config.paths.checkpoint)
    dataset = load_dataset(args.dataset or config.paths.dataset)
    if dataset.frame != model.frame:
        raise ConfigurationError(
            f"Dataset frame {dataset.frame} does not match the model frame {model.frame}"
        )
    images = dataset.images(args.split)
    labels = dataset.labels(args.split)
    model.backbone.architecture.validate(*images.shape[1:3])
    betp, _ = model.predict(images)
    # soft labels of the evaluated split must be acts for their utilities to exist
    soft_labels = list(model.soft_labels) + dataset.soft_labels(args.split)
    acts = act_list_for_policy(model.frame, config.acts.policy, soft_labels)
    gamma = args.gamma if args.gamma is not None else config.utility.gamma
    table = UtilityTable.build(model.frame, acts, gamma, config.base_utilities())
    return _Inference(model, dataset, betp, labels, table)


def cmd_predict(args, config: RunConfig):
    run = _run_inference(args, config)
    result = SegResult.from_betp(run.betp, run.labels, run.table)
    out = Path(args.out or _output_dir(config) / "predictions")
    out.mkdir(parents=True, exist_ok=True)
    frame = run.model.frame
    for position, index in enumerate(run.dataset.split[args.split]):
        stem = out / f"sample_{index:05d}"
        assigned = result.assigned[position]
        save_mask(f"{stem}_assigned.efmk", assigned, frame)
        save_tensor(f"{stem}_betp.eftn", run.betp[position])
        save_ppm(
            f"{stem}_assigned.ppm",
            render_assignment(assigned, frame, run.labels[position]),
        )
        save_ppm(f"{stem}_labels.ppm", render_labels(run.labels[position], frame))
    logger.info(f"Wrote {len(result.assigned)} predictions to {out}")


def cmd_evaluate(args, config: RunConfig):
    run = _run_inference(args, config)
    result = SegResult.from_betp(run.betp, run.labels, run.table)
    report = evaluate(result, run.table, config.metrics.bins)
    out = Path(args.out or _output_dir(config) / "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out, index=False)
    logger.info(
        f"PU={report.pu:.4f} UIoU={report.uiou:.4f} ECE={report.ece:.4f}, wrote {out}"
    )

    if np.any(~result.known):
        novelty = novelty_stats(result, run.model.frame, run.dataset.novel(args.split))
        novelty.assignments.to_csv(
            out.with_name("novelty_assignments.csv"), index=False
        )
        novelty.containing.to_csv(out.with_name("novelty_containing.csv"), index=False)
        pd.DataFrame(
            {
                "pixels": ["unknown", "known"],
                "omega_rate": [novelty.unknown_omega_rate, novelty.known_omega_rate],
                "count": [novelty.unknown_pixels, novelty.known_pixels],
            }
        ).to_csv(out.with_name("novelty.csv"), index=False)

    if args.gamma_sweep:
        sweep = sweep_gamma(
            run.betp,
            run.labels,
            run.model.frame,
            run.table.acts,
            config.metrics.gamma_grid,
            config.metrics.bins,
            config.base_utilities(),
        )
        sweep.to_csv(out.with_name("gamma_sweep.csv"), index=False)


def cmd_calibrate(args, config: RunConfig):
    run = _run_inference(args, config)
    result = SegResult.from_betp(run.betp, run.labels, run.table)
    report = calibration(result, run.table, config.metrics.bins)
    out = Path(args.out or _output_dir(config) / "reliability.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out, index=False)
    logger.info(f"ECE={report.ece:.4f} over {report.Q} bins, wrote {out}")
    if args.plot:
        plot = out.with_suffix(".png") if args.plot is True else args.plot
        plot_reliability(report.to_frame(), report.ece, plot)


def plot_reliability(bins: pd.DataFrame, ece: float, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_rel, ax_hist) = plt.subplots(1, 2, figsize=(9, 4))
    centers = (bins["lower"] + bins["upper"]) / 2
    width = bins["upper"] - bins["lower"]
    filled = bins["count"] > 0
    ax_rel.bar(
        centers[filled], bins["utility"][filled], width=width[filled], edgecolor="k"
    )
    ax_rel.plot([0, 1], [0, 1], "r--")
    ax_rel.set_xlabel("confidence")
    ax_rel.set_ylabel("average utility")
    ax_rel.set_title(f"ECE = {ece:.4f}")
    ax_hist.bar(centers, bins["fraction"], width=width, edgecolor="k")
    ax_hist.set_xlabel("confidence")
    ax_hist.set_ylabel("fraction of pixels")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Wrote {path}")


def parse_act_tokens(text: str, frame: Frame) -> T.List[ClassSet]:
    """Expand ``singletons``, ``pairs``, ``omega``, ``all`` and explicit set tokens."""
    sets: T.List[ClassSet] = []
    for token in filter(None, (part.strip() for part in text.split(","))):
        if token == "singletons":
            sets.extend(frame.singletons())
        elif token == "pairs":
            sets.extend(
                ClassSet.from_indices((i, j))
                for i in range(frame.M)
                for j in range(i + 1, frame.M)
            )
        elif token == "all":
            sets.extend(act_list_for_policy(frame, "all"))
        else:
            sets.append(ClassSet.parse(token, frame))
    return sets


def cmd_owa(args, config: RunConfig):
    if args.m < 2:
        raise ConfigurationError("--m must be at least 2")
    gamma = args.gamma if args.gamma is not None else config.utility.gamma
    frame = Frame.with_size(args.m)
    labels = frame.singletons()
    if args.soft_labels:
        for label in parse_act_tokens(args.soft_labels, frame):
            if label not in labels:
                labels.append(label)
    # acts always hold the singletons and Ω, and every label
    acts: ActList = build_act_list(frame, parse_act_tokens(args.acts, frame) + labels)
    tables = OWA_TABLES[:-1] if args.table == "all" else (args.table,)
    table = UtilityTable.build(frame, acts, gamma, labels=labels)

    for position, name in enumerate(tables):
        if len(tables) > 1:
            if position:
                print()
            print(f"# {name}")
        if name == "weights":
            frame_out = _owa_weights_frame(gamma, sorted({len(act) for act in acts}))
            print(frame_out.to_csv(index=False), end="")
            continue
        if name == "extended":
            values, columns = table.extended, list(frame.names)
        else:
            values, columns = table.soft, [label.describe(frame) for label in labels]
        frame_out = pd.DataFrame(values, columns=columns)
        frame_out.insert(0, "act", acts.describe())
        print(frame_out.to_csv(index=False, float_format="%.4f"), end="")


def _owa_weights_frame(gamma: float, cardinalities: T.Sequence[int]) -> pd.DataFrame:
    owa = OwaWeights(gamma, cardinalities)
    rows = []
    for k in cardinalities:
        weights = owa[k]
        for position, weight in enumerate(weights, start=1):
            rows.append(
                {
                    "cardinality": k,
                    "position": position,
                    "weight": round(float(weight), 6),
                    "tdi": round(tdi(weights), 6),
                }
            )
    return pd.DataFrame(rows, columns=["cardinality", "position", "weight", "tdi"])


def cmd_gradcheck(args, config: RunConfig):
    if args.dataset is not None:
        dataset = load_dataset(args.dataset)
        frame = _check_frame(config, dataset)
        images = dataset.images("train")[: args.images]
        labels = dataset.labels("train")[: args.images]
        soft_labels = dataset.soft_labels("train")
    else:
        frame = config.build_frame()
        data = config.data
        dataset = gen_synthetic(
            frame,
            count=args.images,
            size=tuple(data.size),
            seed=config.seed,
            boundary_width=data.boundary_width,
            noise_sigma=data.noise_sigma,
            split=(1.0, 0.0, 0.0),
        )
        images = dataset.images("train")
        labels = dataset.labels("train")
        soft_labels = dataset.soft_labels()
    soft_labels = soft_labels + config.extra_soft_labels()

    architecture = config.build_architecture()
    architecture.validate(*images.shape[1:3])
    acts = act_list_for_policy(frame, config.acts.policy, soft_labels)
    table = UtilityTable.build(frame, acts, config.utility.gamma, config.base_utilities())
    model = EFCNModel.initialize(
        frame,
        architecture,
        head_kind=args.head or config.ds_layer.head,
        n_prototypes=config.ds_layer.count(frame.M),
        seed=config.seed,
        dtype=np.float64,
        soft_labels=soft_labels,
    )
    report = grad_check(
        model, images, labels, table, samples=args.samples, seed=config.seed
    )
    print(report.to_frame().to_csv(index=False), end="")
    print(
        f"# checked={report.checked} skipped={report.skipped} "
        f"max_relative_error={report.max_relative_error:.3e}"
    )
    if not report.passed(args.tolerance):
        raise GradientCheckError(
            f"Max relative error {report.max_relative_error:.3e} in "
            f"`{report.worst_parameter}` exceeds {args.tolerance}"
        )


if __name__ == "__main__":
    sys.exit(main())
