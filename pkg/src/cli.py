"""
Command-line surface: gen, train, distill, quantize, eval, infer, export, sweep.

Exit codes: 0 success, 1 usage error, 2 data/format/quantization error,
3 numeric failure (divergence, non-finite values).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.config import FliSettings, load_settings, setup_logging
from src.datagen import (IrfConfig, ParamsMode, TimeGrid, build_dataset, build_mono_dataset, dataset_stats,
                         load_idx, load_irf, split_dataset)
from src.errors import (ConfigError, DataFormatError, FliqError, NonFiniteError, QuantizationError, ShapeError,
                        TrainingDivergedError)
from src.gru_model import ModelConfig, ModelKind, SeqModel
from src.metrics import EngineKind, evaluate, fit_lifetime, lifetime_report, run_inference
from src.persistence import export_fpga, load_dataset, load_model, save_dataset, save_model
from src.quant import QuantizedModel, QuantMode, compression_summary, ptq_model
from src.training import DEFAULT_SWEEP, TrainConfig, sweep_hidden_sizes, train_student_qat_kd, train_teacher

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
# "full_range" is accepted as an alias of "paper"
MODE_CHOICES = [m.value for m in QuantMode] + ["full_range"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports bad usage as an exception instead of exiting with 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--alpha", type=float, default=0.8, help="MSE weight of the mixed loss")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--val-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fliq", description="Compressed GRU deconvolution for fluorescence lifetime imaging")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--env-file", default=None, help="Path to a .env file with FLI_* settings")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--workers", type=int, default=None)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen", help="Generate a synthetic dataset")
    gen.add_argument("--images", help="IDX3 image file (raw or gzip)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-images", type=int, default=None)
    gen.add_argument("--gates", type=int, default=256)
    gen.add_argument("--window-ns", type=float, default=10.0)
    gen.add_argument("--peak-counts", type=float, default=500.0)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--mono-tau", type=float, default=None, help="Mono-exponential scenario lifetime (ns)")
    gen.add_argument("--n-records", type=int, default=1000, help="Record count for the mono scenario")
    gen.add_argument("--irf", default=None, help="Measured IRF CSV (one value per gate)")
    gen.add_argument("--fwhm-ns", type=float, default=0.2)
    gen.add_argument("--params-mode", choices=[m.value for m in ParamsMode], default=ParamsMode.PER_IMAGE.value)

    train = sub.add_parser("train", help="Train a float teacher or lite model")
    train.add_argument("--data", required=True)
    train.add_argument("--arch", choices=[k.value for k in ModelKind], default=ModelKind.TEACHER.value)
    train.add_argument("--hidden", required=True, help="Hidden sizes, e.g. 64x16 or 32")
    train.add_argument("--out", required=True)
    train.add_argument("--seq-len", type=int, default=None)
    train.add_argument("--history", default=None, help="Optional CSV of per-epoch losses")
    _add_train_options(train)

    distill = sub.add_parser("distill", help="Train a lite student with QAT and distillation")
    distill.add_argument("--data", required=True)
    distill.add_argument("--teacher", required=True)
    distill.add_argument("--hidden", required=True)
    distill.add_argument("--bits", choices=["8", "16", "none"], default="8")
    distill.add_argument("--beta", type=float, default=0.5)
    distill.add_argument("--mode", choices=MODE_CHOICES, default=QuantMode.SIGNED_SYMMETRIC.value)
    distill.add_argument("--out", required=True)
    _add_train_options(distill)

    quantize = sub.add_parser("quantize", help="Post-training quantization")
    quantize.add_argument("--model", required=True)
    quantize.add_argument("--bits", type=int, choices=[8, 16], required=True)
    quantize.add_argument("--mode", choices=MODE_CHOICES, default=QuantMode.SIGNED_SYMMETRIC.value)
    quantize.add_argument("--calib", required=True)
    quantize.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="Score a model on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--engine", choices=[e.value for e in EngineKind], default=EngineKind.FLOAT.value)
    ev.add_argument("--report", required=True)
    ev.add_argument("--lifetimes", default=None, help="Optional CSV of recovered lifetimes")

    infer = sub.add_parser("infer", help="Deconvolve TPSFs from a CSV (one curve per row)")
    infer.add_argument("--model", required=True)
    infer.add_argument("--tpsf", required=True)
    infer.add_argument("--out", required=True)
    infer.add_argument("--engine", choices=[e.value for e in EngineKind], default=EngineKind.FLOAT.value)
    infer.add_argument("--fit-lifetime", action="store_true")
    infer.add_argument("--window-ns", type=float, default=10.0)

    export = sub.add_parser("export", help="Export a quantized model for FPGA bring-up")
    export.add_argument("--model", required=True)
    export.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", help="Hidden-size weight-reduction study")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--configs", default=",".join(DEFAULT_SWEEP))
    sweep.add_argument("--bits", default="16,8")
    sweep.add_argument("--out", required=True)
    _add_train_options(sweep)
    return parser


def _seed(args: argparse.Namespace, settings: FliSettings) -> int:
    return args.seed if args.seed is not None else settings.default_seed


def _train_config(args: argparse.Namespace, settings: FliSettings, **overrides) -> TrainConfig:
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, mixed_alpha=args.alpha,
                         seed=_seed(args, settings), val_fraction=args.val_fraction,
                         deterministic=settings.deterministic, workers=settings.workers, **overrides)
    config.validate()
    return config


def cmd_gen(args: argparse.Namespace, settings: FliSettings) -> int:
    seed = _seed(args, settings)
    grid = TimeGrid.from_window(args.gates, args.window_ns)
    irf_config = IrfConfig(fwhm_ns=args.fwhm_ns)
    if args.irf:
        irf_config.measured = load_irf(args.irf, args.gates)

    if args.mono_tau is not None:
        dataset = build_mono_dataset(args.n_records, grid, args.mono_tau, args.peak_counts, irf_config, seed)
    else:
        if not args.images:
            raise UsageError("gen needs --images unless --mono-tau is given")
        images = load_idx(args.images)
        if args.n_images is not None:
            images = images[:args.n_images]
        dataset = build_dataset(images, grid, irf_config, args.peak_counts, ParamsMode(args.params_mode),
                                seed, workers=settings.workers)
    save_dataset(dataset, args.out)
    stats = dataset_stats(dataset)
    logger.info("Dataset summary: " + ", ".join(f"{k}={v:.4g}" for k, v in stats.items()))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: FliSettings) -> int:
    dataset = load_dataset(args.data)
    seq_len = args.seq_len or dataset.grid.n_gates
    model_config = ModelConfig.from_hidden_spec(args.hidden, ModelKind(args.arch), seq_len)
    config = _train_config(args, settings)
    model, history = train_teacher(dataset, model_config, config)
    save_model(model, args.out, provenance={"seed": config.seed, "dataset_seed": dataset.seed,
                                            "epochs": len(history), "best_epoch": history.best_epoch})
    if args.history:
        history.to_frame().to_csv(args.history, index=False)
    return EXIT_OK


def cmd_distill(args: argparse.Namespace, settings: FliSettings) -> int:
    dataset = load_dataset(args.data)
    teacher = load_model(args.teacher)
    if not isinstance(teacher, SeqModel):
        raise QuantizationError("Teacher must be a float model")
    bits = None if args.bits == "none" else int(args.bits)
    mode = QuantMode(args.mode)
    student_config = ModelConfig.from_hidden_spec(args.hidden, ModelKind.LITE, dataset.grid.n_gates)
    config = _train_config(args, settings, kd_beta=args.beta, qat_bits=bits, qat_mode=mode)
    student, history = train_student_qat_kd(dataset, teacher, student_config, config)

    provenance = {"seed": config.seed, "dataset_seed": dataset.seed, "epochs": len(history),
                  "kd_beta": config.kd_beta, "qat_bits": bits}
    if bits is None:
        save_model(student, args.out, provenance=provenance)
        summary = compression_summary(teacher, student)
    else:
        train, _ = split_dataset(dataset, config.val_fraction, config.seed)
        qstudent = ptq_model(student, bits, train, mode)
        save_model(qstudent, args.out, provenance=provenance)
        summary = compression_summary(teacher, qstudent)
    logger.info(f"Student keeps {summary['student_parameters']} of {summary['teacher_parameters']} parameters "
                f"({summary['parameter_reduction_pct']:.1f}% fewer)")
    return EXIT_OK


def cmd_quantize(args: argparse.Namespace, settings: FliSettings) -> int:
    model = load_model(args.model)
    if isinstance(model, QuantizedModel):
        raise QuantizationError("Model is already quantized")
    calib = load_dataset(args.calib)
    qmodel = ptq_model(model, args.bits, calib, QuantMode(args.mode))
    save_model(qmodel, args.out, provenance={"calib_dataset_seed": calib.seed})
    return EXIT_OK


def _summary_path(report: str) -> Path:
    return Path(report).with_suffix(".summary.json")


def cmd_eval(args: argparse.Namespace, settings: FliSettings) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, args.engine)
    report.to_csv(args.report)
    report.save_summary(_summary_path(args.report))
    if args.lifetimes:
        lifetime_report(model, dataset, args.engine).to_csv(args.lifetimes, index=False)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace, settings: FliSettings) -> int:
    model = load_model(args.model)
    try:
        curves = pd.read_csv(args.tpsf, header=None).to_numpy(dtype=np.float64)
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read TPSF file {args.tpsf}: {e}")
    if curves.shape[1] != model.config.seq_len:
        raise ShapeError(f"TPSF rows have {curves.shape[1]} gates, model expects {model.config.seq_len}")
    preds, tag, path = run_inference(model, curves, args.engine)
    frame = pd.DataFrame(preds, columns=[f"gate_{i}" for i in range(preds.shape[1])])
    if args.fit_lifetime:
        grid = TimeGrid.from_window(model.config.seq_len, args.window_ns)
        taus = []
        for pred in preds:
            try:
                taus.append(fit_lifetime(pred, grid))
            except ShapeError as e:
                logger.warning(f"Lifetime fit failed: {e}")
                taus.append(float("nan"))
        frame["tau_ns"] = taus
    frame.to_csv(args.out, index=False)
    logger.info(f"Deconvolved {len(frame)} curves on {tag}/{path} into {args.out}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace, settings: FliSettings) -> int:
    export_fpga(load_model(args.model), args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: FliSettings) -> int:
    dataset = load_dataset(args.data)
    configs = [c.strip() for c in args.configs.split(",") if c.strip()]
    try:
        bits = [int(b) for b in args.bits.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--bits must be a comma-separated list of 8/16, got {args.bits!r}")
    frame = sweep_hidden_sizes(dataset, configs, _train_config(args, settings), bits)
    frame.to_csv(args.out, index=False)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, FliSettings], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "distill": cmd_distill,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "export": cmd_export,
    "sweep": cmd_sweep,
}


def _settings_for(args: argparse.Namespace) -> FliSettings:
    settings = load_settings(args.env_file)
    if args.log_level:
        settings.log_level = args.log_level.upper()
    if args.workers is not None:
        settings.workers = args.workers
    if args.deterministic is not None:
        settings.deterministic = args.deterministic
    settings.validate()
    return settings


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and map failures onto exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version exit through argparse
        return int(e.code or 0)

    try:
        settings = _settings_for(args)
        setup_logging(settings)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError) as e:
        logger.error(f"Numeric failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, QuantizationError, ShapeError, ConfigError, FliqError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
