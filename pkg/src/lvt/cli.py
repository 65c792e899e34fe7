"""Command-line entry points.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one line ``lvt: error kind=<kind> reason=<json string>`` to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from lvt import config as cfg
from lvt import data_io as dio
from lvt import frame_codec as fc
from lvt import latent_transformer as lt
from lvt import metrics
from lvt import numerics as nx
from lvt import sampler as sm
from lvt import training as tr

logger = logging.getLogger("lvt")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("config", message, EXIT_CONFIG)


def _fail(kind: str, reason: str, code: int):
    print(f"lvt: error kind={kind} reason={json.dumps(str(reason))}", file=sys.stderr)
    raise SystemExit(code)


class VideoDir:
    """Videos written by ``make-data``, indexable like a dataset."""

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest = self.directory / "manifest.txt"
        if not manifest.exists():
            raise DataError(f"{manifest} not found")
        self.names = [n for n in manifest.read_text().split() if n]

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return dio.read_video(self.directory / self.names[i])


def _dataset(run: cfg.RunConfig, data_dir):
    return VideoDir(data_dir) if data_dir else dio.SyntheticDataset(run.data)


def _sidecar(path, **info):
    Path(str(path) + ".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def cmd_make_data(args):
    pairs = {k.split(".", 1)[1]: v for k, v in cfg.read_pairs(args.spec).items() if k.startswith("data.")}
    spec = cfg._build(dio.SyntheticSpec, pairs, "data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(spec.count):
        name = f"video_{i:05d}.lvtv"
        dio.write_video(out / name, dio.synthetic_video(spec, i), dtype=args.dtype)
        names.append(name)
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    _sidecar(out / "manifest.txt", config_digest=dio.config_digest(spec), spec=dio._jsonable(spec))
    print(f"wrote {spec.count} videos to {out}")


def cmd_train_codec(args):
    run = cfg.load_config(args.config)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    steps = args.steps if args.steps is not None else run.train.codec_steps
    data = _dataset(run, args.data)
    log = tr.CsvLog(str(args.out) + ".log.csv")
    state = tr.train_codec(data, run.codec, steps, run.train.codec_batch, run.train.codec_lr, run.seed,
                           log=log, log_every=run.train.log_every)
    dio.save_checkpoint(args.out, tr.codec_checkpoint(state, {"run_digest": run.digest, "seed": run.seed}))
    print(f"codec step {state.params.step} loss {state.history[-1] if state.history else float('nan'):.6g}")


def _load_codec(path) -> tr.CodecState:
    return tr.codec_from_checkpoint(dio.load_checkpoint(path))


def _load_lvt(path) -> tr.LvtState:
    return tr.lvt_from_checkpoint(dio.load_checkpoint(path))


def cmd_train_lvt(args):
    run = cfg.load_config(args.config)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    codec = _load_codec(args.codec)
    if codec.config != run.codec:
        raise cfg.ConfigError("codec checkpoint config differs from the run config's codec section")
    data = _dataset(run, args.data)
    count = min(run.train.lvt_videos, len(data))
    grids = tr.encode_dataset(codec, data, range(count))
    steps = args.steps if args.steps is not None else run.train.lvt_steps
    log = tr.CsvLog(str(args.out) + ".log.csv")
    state = tr.train_lvt(grids, run.transformer, steps, run.train.lvt_batch, run.train.lvt_lr, run.seed,
                         log=log, log_every=run.train.log_every)
    dio.save_checkpoint(args.out, tr.lvt_checkpoint(state, {"run_digest": run.digest, "seed": run.seed}))
    print(f"lvt step {state.params.step} bits/dim {tr.evaluate_bpd(state, grids[: min(8, count)]):.4f}")


def cmd_encode(args):
    codec = _load_codec(args.codec)
    video = torch.from_numpy(dio.read_video(args.video))
    grid = fc.encode_video(video, codec.params, codec.codebook, codec.config)
    dio.write_latent(args.out, grid, codec.config.K)
    _sidecar(args.out, config_digest=dio.config_digest(codec.config))
    print(f"encoded {tuple(video.shape)} -> {tuple(grid.shape)}")


def cmd_generate(args):
    codec = _load_codec(args.codec)
    model = _load_lvt(args.lvt)
    if model.config.extents[0] != args.frames:
        raise cfg.ConfigError(f"--frames {args.frames} != model frame count {model.config.extents[0]}")
    sampler = sm.SamplerConfig(args.temperature, args.seed, args.t0, args.frames, args.greedy, not args.naive)
    prime = torch.from_numpy(dio.read_video(args.prime))
    if prime.shape[0] < args.t0:
        raise DataError(f"priming video has {prime.shape[0]} frames, need {args.t0}")
    video, grid = sm.generate(prime[: args.t0], codec.params, codec.codebook, codec.config, model.params,
                              model.config, sampler)
    dio.write_video(args.out, video)
    _sidecar(args.out, codec_digest=dio.config_digest(codec.config), lvt_digest=dio.config_digest(model.config),
             sampler=dio._jsonable(sampler))
    print(f"generated {tuple(video.shape)}")


def cmd_eval(args):
    codec = _load_codec(args.codec)
    data = VideoDir(args.data)
    limit = len(data) if args.limit is None else min(args.limit, len(data))
    if limit < 1:
        raise DataError("no videos to evaluate")
    report = metrics.EvalReport(config_digest=dio.config_digest(codec.config))
    report.mse = tr.codec_reconstruction_mse(codec, data, range(limit))
    grids = tr.encode_dataset(codec, data, range(limit))
    usage = metrics.codebook_usage(grids, codec.config.K)
    report.usage_histogram = usage.histogram.tolist()
    report.perplexity = usage.perplexity.tolist()
    report.mass_count = usage.mass_count.tolist()
    t0 = args.t0
    base = []
    for i in range(limit):
        v = torch.from_numpy(data[i])
        base.append(metrics.reconstruction_mse(v[t0:], metrics.last_frame_baseline(v[:t0], v.shape[0])[t0:]))
    report.baseline_mse = float(np.mean(base))
    if args.lvt:
        model = _load_lvt(args.lvt)
        report.bits_per_dim = tr.evaluate_bpd(model, grids)
        report.config_digest = dio.config_digest({"codec": codec.config, "lvt": model.config})
        if args.gen_samples:
            gen = []
            for i in range(min(args.gen_samples, limit)):
                v = torch.from_numpy(data[i])
                s = sm.SamplerConfig(seed=args.seed + i, prime_frames=t0, frames=v.shape[0], greedy=args.greedy)
                out, _ = sm.generate(v[:t0], codec.params, codec.codebook, codec.config, model.params, model.config, s)
                gen.append(metrics.reconstruction_mse(v[t0:], out[t0:]))
            report.generation_mse = float(np.mean(gen))
    txt, js = dio.write_report(args.out, report)
    print(f"wrote {txt} and {js}")


def _palette(K: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.integers(32, 256, size=(K, 3)).astype(np.uint8)


def cmd_inspect_codes(args):
    grid, K = dio.read_latent(args.latent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pal = _palette(K)
    scale = args.scale
    T, h, w, n_c = grid.shape
    for j in range(n_c):
        colored = pal[grid[..., j]]  # (T, h, w, 3)
        colored = colored.repeat(scale, axis=1).repeat(scale, axis=2)
        dio.export_frames(out / f"codes_{j}", colored, prefix="codes")
    if T >= 2:
        masks = metrics.code_change_mask(grid)
        for j in range(n_c):
            m = (masks[..., j] * 255).astype(np.uint8)[..., None].repeat(3, axis=-1)
            dio.export_frames(out / f"changes_{j}", m.repeat(scale, axis=1).repeat(scale, axis=2), prefix="change")
    usage = metrics.codebook_usage(grid, K)
    summary = {"K": K, "shape": list(grid.shape), "mass80_count": usage.mass_count.tolist(),
               "perplexity": usage.perplexity.tolist()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote code maps for {n_c} codebooks to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvt", description="Latent video transformer: codec, generator and tooling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-data", help="write a synthetic video dataset")
    s.add_argument("--spec", required=True, help="config file with data.* keys")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--dtype", choices=("u8", "f32"), default="u8", help="pixel storage type")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-codec", help="train the frame autoencoder")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--data", help="directory from make-data (default: synthesize from config)")
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train-lvt", help="train the latent transformer")
    s.add_argument("--config", required=True)
    s.add_argument("--codec", required=True, help="codec checkpoint")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--data", help="directory from make-data (default: synthesize from config)")
    s.set_defaults(func=cmd_train_lvt)

    s = sub.add_parser("encode", help="encode a video file to a latent file")
    s.add_argument("--codec", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("generate", help="continue a priming video")
    s.add_argument("--codec", required=True)
    s.add_argument("--lvt", required=True)
    s.add_argument("--prime", required=True, help="video file; its first --t0 frames are used")
    s.add_argument("--t0", type=int, default=5)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--greedy", action="store_true", help="argmax decoding")
    s.add_argument("--naive", action="store_true", help="recompute everything per symbol")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="evaluate codec (and transformer) on a dataset directory")
    s.add_argument("--codec", required=True)
    s.add_argument("--lvt")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path stem; writes .txt and .json")
    s.add_argument("--t0", type=int, default=5, help="priming frames for the baseline and generation")
    s.add_argument("--limit", type=int, help="evaluate only the first N videos")
    s.add_argument("--gen-samples", type=int, default=0, help="videos to generate for generation MSE")
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-codes", help="index-colour maps and code-change masks")
    s.add_argument("--latent", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=8, help="pixels per latent cell")
    s.set_defaults(func=cmd_inspect_codes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    nx.configure_runtime()
    try:
        args.func(args)
    except cfg.ConfigError as exc:
        _fail("config", exc, EXIT_CONFIG)
    except nx.NumericError as exc:
        _fail("numeric", exc, EXIT_NUMERIC)
    except (DataError, dio.FormatError, OSError, IndexError, ValueError) as exc:
        _fail("data", exc, EXIT_DATA)
    return 0


if __name__ == "__main__":
    sys.exit(main())
