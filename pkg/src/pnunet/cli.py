"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, bench. Each reads one JSON
config (--config), applies --set overrides, and writes everything into
one output directory (--out or output_dir in the config), always
including a report.json with the fully resolved config, the seeds in
effect, and sha256 hashes of every artifact written, so a run can be
reproduced and verified byte for byte.

Exit status: 0 success, 2 configuration problems (message names the
dotted path), 1 runtime failures.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import baseline, detect, imaging, model, train
from .config import ConfigError, RunConfig, load_config
from .weights import load_weights

__all__ = ["main", "dispatch"]


def _require(value, path: str, why: str):
    if value is None:
        raise ConfigError(path, why)
    return value


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report(out_dir: Path, command: str, cfg: RunConfig, extra: dict) -> Path:
    """report.json: resolved config + seeds + artifact hashes + command extras."""
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "report.json":
            artifacts[str(p.relative_to(out_dir))] = _sha256(p)
    report = {
        "command": command,
        "resolved_config": cfg.resolved(),
        "seeds": {
            "trainer": cfg.trainer.seed,
            "model": cfg.model.seed,
            "search": cfg.search.seed,
            "gendata": cfg.gendata.seed,
        },
        "artifacts": artifacts,
    }
    report.update(extra)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2))
    return path


def _out_dir(cfg: RunConfig, args) -> Path:
    out = args.out or cfg.output_dir
    _require(out, "output_dir", "set output_dir in the config or pass --out")
    return Path(out)


def _load_recon(cfg: RunConfig):
    path = _require(cfg.weights, "weights", "this command needs a weights file")
    return load_weights(path)


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    """Write a synthetic corpus of textures with scratch/blob defects."""
    out = _out_dir(cfg, args)
    manifest = imaging.generate_corpus(out, cfg.gendata)
    return {"num_defects": len(manifest["defects"]), "manifest": str(out / "manifest.json")}


def cmd_train(cfg: RunConfig, args) -> dict:
    """Train the reconstructor with the mask self-training schedule."""
    dataset = _require(cfg.dataset, "dataset", "training needs a dataset section")
    out = _out_dir(cfg, args)
    model_cfg = replace(cfg.model)
    _, _, report = train.run_training(
        dataset,
        cfg.trainer,
        model_cfg=model_cfg,
        ssim_cfg=cfg.ssim,
        out_dir=out,
        dump_masks=bool(getattr(args, "dump_masks", False)),
    )
    return report


def cmd_infer(cfg: RunConfig, args) -> dict:
    """Score a folder of images: map + mask + raw values per image.

    Queries come from dataset.anomalous_dir when set, else
    dataset.normal_dir. The binarization threshold is the configured
    percentile of normal-map pixels when a separate normal_dir exists,
    of the query maps themselves otherwise.
    """
    dataset = _require(cfg.dataset, "dataset", "inference needs a dataset section")
    out = _out_dir(cfg, args)
    params, _ = _load_recon(cfg)
    query_dir = dataset.anomalous_dir or dataset.normal_dir
    paths = imaging.list_images(query_dir)
    if not paths:
        raise ValueError(f"no images found in {query_dir}")
    results = {}
    for p in paths:
        x = imaging.load_image(p, grayscale=dataset.grayscale)
        results[p.stem] = detect.anomaly_map(params, x)
    if dataset.anomalous_dir is not None:
        normals = [
            detect.anomaly_map(params, imaging.load_image(p, grayscale=dataset.grayscale))
            for p in imaging.list_images(dataset.normal_dir)
        ]
        threshold_source = "normal_dir"
        threshold = detect.choose_threshold(normals)
    else:
        threshold_source = "query_maps"
        threshold = detect.choose_threshold(list(results.values()))
    written = []
    for stem, r in results.items():
        written.append(detect.write_result(out, stem, detect.apply_threshold(r, threshold)))
    return {
        "num_images": len(paths),
        "threshold": threshold,
        "threshold_source": threshold_source,
        "outputs": written,
    }


def cmd_eval(cfg: RunConfig, args) -> dict:
    """Pixel AUROC of anomaly maps against ground-truth masks."""
    dataset = _require(cfg.dataset, "dataset", "evaluation needs a dataset section")
    _require(dataset.anomalous_dir, "dataset.anomalous_dir", "evaluation needs anomalous images")
    _require(dataset.ground_truth_dir, "dataset.ground_truth_dir", "evaluation needs masks")
    out = _out_dir(cfg, args)
    params, _ = _load_recon(cfg)
    return detect.evaluate_dataset(params, dataset, out_dir=out)


def cmd_bench(cfg: RunConfig, args) -> dict:
    """Time feed-forward vs latent-search inference on real images.

    Wall-clock depends only on the architecture, so fresh networks are
    timed unless a weights file is configured for the reconstructor.
    """
    dataset = _require(cfg.dataset, "dataset", "benchmarking needs a dataset section")
    out = _out_dir(cfg, args)
    size = cfg.trainer.patch_size
    if cfg.weights is not None:
        recon_params, model_cfg = load_weights(cfg.weights)
    else:
        model_cfg = replace(cfg.model)
        recon_params = model.init_reconstructor(model_cfg)
    ae = baseline.init_autoencoder(
        baseline.AutoencoderConfig(
            in_channels=model_cfg.in_channels, image_size=size, seed=cfg.search.seed
        )
    )
    images = []
    for p in imaging.list_images(dataset.normal_dir):
        img = imaging.load_image(p, grayscale=dataset.grayscale)
        if img.shape[0] < size or img.shape[1] < size:
            continue
        i = (img.shape[0] - size) // 2
        j = (img.shape[1] - size) // 2
        images.append(img[i : i + size, j : j + size])
    report = baseline.bench_inference(
        recon_params, ae, images, cfg.search, out_path=out / "bench.json"
    )
    return {"bench": report}


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def dispatch(command: str, cfg: RunConfig, args) -> int:
    extra = _COMMANDS[command](cfg, args)
    out = _out_dir(cfg, args)
    _write_report(out, command, cfg, extra)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pnunet",
        description="Noise-mask anomaly detection: train, score, evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value by dotted path (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory (beats output_dir)")
        p.add_argument("--seed", type=int, default=None, help="seed for every section")
        if name == "train":
            p.add_argument(
                "--dump-masks",
                action="store_true",
                help="write mask images at every mask update",
            )
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.overrides, seed=args.seed)
        return dispatch(args.command, cfg, args)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: one line, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
