"""``segcn`` command-line entry point.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .baselines import StainBasis, lab_stats, macenko_fit, macenko_normalize, reinhard_normalize
from .data import SynthConfig, generate_synthetic, load_domain, read_mask, read_rgb, save_dataset
from .errors import ConfigError, NumericalError, SegCNError
from .guidance import PretrainConfig, pretrain_semantic_net
from .metrics import MetricReport, cwssim, nmi_values, ssim, structure_dice
from .trainer import (TrainingConfig, fit, load_checkpoint, normalize_image, predict_structure,
                      to_tensor)

log = logging.getLogger("segcn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
METHODS = ("segcn", "cyclegan", "reinhard", "macenko")

MODEL_KEYS = ("conv_mode", "guidance_mode", "affinity_mode", "generator_widths",
              "discriminator_widths", "semantic_widths", "layers_per_block", "kernel_size",
              "sigma_init", "guidance_channels")
PRETRAIN_PREFIX = "pretrain_"


class UsageError(SegCNError):
    pass


def _reject_unknown(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")


@dataclass
class EvalConfig:
    direction: str = "AB"
    mask_threshold: float = 0.5


@dataclass
class RunConfig:
    """Validated JSON run configuration.

    Sections:
        data: :class:`~segcn.data.SynthConfig` fields; stain bases as two 3-vectors
            (hematoxylin, eosin).
        model: generator/PAC fields of :class:`~segcn.trainer.TrainingConfig`.
        training: the remaining TrainingConfig fields, plus ``pretrain_epochs``,
            ``pretrain_batch_size`` and ``pretrain_learning_rate`` for the semantic network.
        eval: ``direction`` (AB or BA) and ``mask_threshold``.
    """

    data: SynthConfig = field(default_factory=SynthConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls._from_dict(doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def _from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown("top level", doc, ("data", "model", "training", "eval"))
        sections = {k: doc.get(k, {}) or {} for k in ("data", "model", "training", "eval")}
        for name, sec in sections.items():
            if not isinstance(sec, dict):
                raise ConfigError(f"section '{name}' must be an object")

        data = dict(sections["data"])
        _reject_unknown("data", data, [f.name for f in fields(SynthConfig)])
        for key in ("stain_basis_a", "stain_basis_b"):
            if key in data:
                data[key] = StainBasis(np.asarray(data[key], dtype=np.float64).T)
        synth = SynthConfig(**data)

        _reject_unknown("model", sections["model"], MODEL_KEYS)
        train_keys = [f.name for f in fields(TrainingConfig) if f.name not in MODEL_KEYS]
        pre_keys = [PRETRAIN_PREFIX + k for k in ("epochs", "batch_size", "learning_rate")]
        _reject_unknown("training", sections["training"], train_keys + pre_keys)
        train = {k: v for k, v in sections["training"].items() if not k.startswith(PRETRAIN_PREFIX)}
        training = TrainingConfig(**train, **sections["model"])
        pre = {k[len(PRETRAIN_PREFIX):]: v for k, v in sections["training"].items()
               if k.startswith(PRETRAIN_PREFIX)}
        pretrain = PretrainConfig(**pre, seed=training.seed, widths=training.semantic_widths)

        _reject_unknown("eval", sections["eval"], [f.name for f in fields(EvalConfig)])
        ev = EvalConfig(**sections["eval"])
        if ev.direction not in ("AB", "BA"):
            raise ConfigError(f"eval.direction must be AB or BA, got {ev.direction!r}")
        return cls(synth, training, pretrain, ev)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self):
        data = asdict(self.data)
        for key in ("stain_basis_a", "stain_basis_b"):
            data[key] = getattr(self.data, key).matrix.T.tolist()
        training = asdict(self.training)
        model = {k: training.pop(k) for k in MODEL_KEYS}
        for k in ("epochs", "batch_size", "learning_rate"):
            training[PRETRAIN_PREFIX + k] = getattr(self.pretrain, k)
        return {"data": data, "model": model, "training": training, "eval": asdict(self.eval)}


def _jsonable(obj):
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


# --- commands ---------------------------------------------------------------------


def cmd_synth_data(args):
    cfg = RunConfig.load(args.config)
    ia, ib, ma, mb = generate_synthetic(cfg.data)
    save_dataset(args.out, ia, ib, ma, mb)
    print(f"wrote {len(ia)} domain-A and {len(ib)} domain-B images to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    tc = cfg.training
    data_a = load_domain(args.data, "a", tc.patch_size)
    data_b = load_domain(args.data, "b", tc.patch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg = None
    if args.resume is None:
        if data_a.masks is None or data_b.masks is None:
            raise SegCNError("semantic pretraining needs masks for both domains")
        images = (to_tensor(np.concatenate([data_a.images, data_b.images])) + 1) / 2
        masks = torch.from_numpy(np.concatenate([data_a.masks, data_b.masks]))
        seg = pretrain_semantic_net(images, masks, cfg.pretrain)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, default=_jsonable)
    state = fit(data_a, data_b, tc, seg_net=seg, out_dir=out, resume=args.resume)
    print(f"trained to step {state.step}; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _eval_config(checkpoint):
    """``eval`` section of the run config saved next to a checkpoint (defaults otherwise)."""
    path = Path(checkpoint).parent / "config.json"
    if not path.exists():
        return EvalConfig()
    return RunConfig.load(path).eval


def _pngs(root):
    root = Path(root)
    if root.is_file():
        return root.parent, [Path(root.name)]
    return root, sorted(p.relative_to(root) for p in root.rglob("*.png"))


def _write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def cmd_normalize(args):
    if args.method in ("segcn", "cyclegan") and args.checkpoint is None:
        raise UsageError(f"--method {args.method} needs --checkpoint")
    if args.method in ("reinhard", "macenko") and args.target is None:
        raise UsageError(f"--method {args.method} needs --target")
    root, files = _pngs(args.input)
    if not files:
        raise SegCNError(f"no PNG files under {args.input}")

    if args.method in ("segcn", "cyclegan"):
        state = load_checkpoint(args.checkpoint)
        guided = state.config.guidance_mode != "none"
        if guided != (args.method == "segcn"):
            raise UsageError(f"checkpoint guidance_mode {state.config.guidance_mode!r} "
                             f"does not fit --method {args.method}")

        direction = _eval_config(args.checkpoint).direction

        def apply(img):
            return normalize_image(img, state, direction)
    elif args.method == "reinhard":
        stats = lab_stats(read_rgb(args.target))

        def apply(img):
            return reinhard_normalize(img, stats)
    else:
        basis = macenko_fit(read_rgb(args.target))

        def apply(img):
            return macenko_normalize(img, basis)

    out = Path(args.output)
    for rel in files:
        _write_png(out / rel, apply(read_rgb(root / rel)))
    print(f"normalized {len(files)} images with {args.method} into {out}")
    return EXIT_OK


def cmd_evaluate(args):
    if args.masks is not None and args.checkpoint is None:
        raise UsageError("--masks needs --checkpoint (the semantic network predicts structure)")
    o_root, o_files = _pngs(args.original)
    n_root, n_files = _pngs(args.normalized)
    if set(o_files) != set(n_files):
        raise UsageError("--original and --normalized trees hold different files")
    if not o_files:
        raise SegCNError("no images to evaluate")
    originals = [read_rgb(o_root / f) for f in o_files]
    normalized = [read_rgb(n_root / f) for f in o_files]

    report = MetricReport(method=Path(args.normalized).name, dataset=str(args.original))
    report.add("nmi", nmi_values(normalized))
    report.add("cwssim", [cwssim(o, n) for o, n in zip(originals, normalized)])
    report.add("ssim", [ssim(o, n) for o, n in zip(originals, normalized)])
    if args.masks is not None:
        state = load_checkpoint(args.checkpoint)
        report.seed = state.config.seed
        threshold = _eval_config(args.checkpoint).mask_threshold
        m_root = Path(args.masks)
        dice = []
        for f, img in zip(o_files, normalized):
            pred = predict_structure(img[None], state.seg, threshold)[0]
            dice.append(structure_dice(read_mask(m_root / f), pred))
        report.add("dice", dice)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    json_path = report_path if report_path.suffix == ".json" else report_path.with_suffix(".json")
    report.write_json(json_path)
    report.write_csv(json_path.with_suffix(".csv"))
    agg = report.aggregates
    print(f"NMI SD {agg['nmi']['sd']:.4f} CV {agg['nmi']['cv']:.4f}; "
          f"CW-SSIM {agg['cwssim']['mean']:.4f}; SSIM {agg['ssim']['mean']:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="segcn", description="Semantic-guided stain normalisation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic two-domain dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="pretrain the semantic network and train the generators")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("normalize", help="normalise every PNG under --input")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--target", help="reference image for reinhard/macenko")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("evaluate", help="NMI, CW-SSIM, SSIM and structure Dice")
    p.add_argument("--original", required=True)
    p.add_argument("--normalized", required=True)
    p.add_argument("--masks", help="ground-truth masks mirroring --original")
    p.add_argument("--checkpoint", help="checkpoint whose semantic network predicts masks")
    p.add_argument("--report", required=True, help="report path; .json and .csv are written")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"segcn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"segcn {args.command}: numerical failure in {exc.component}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SegCNError, OSError) as exc:
        print(f"segcn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
