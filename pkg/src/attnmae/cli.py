"""Operator commands: pretrain, finetune, eval, mask dumps, sampler
benchmark, and gradient checking.

Configuration is a flat key=value text file plus command-line flags;
flags win. Every command is deterministic under a fixed --seed. Exit
codes: 0 success, 1 configuration error, 2 runtime error, 3 failed
gradient check.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import attention as attn
from . import data as data_mod
from . import embedding as emb
from . import masker
from .gradcheck import grad_check
from .model import MaskedAutoencoder, ModelConfig
from .rng import Rng
from .trainer import TrainConfig, evaluate, finetune_loop, pretrain_loop

__all__ = ["main", "ConfigError"]


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {
    "kind": str, "seq_len": int, "layers": int, "embed_dim": int,
    "qk_dim": int, "v_dim": int, "heads": int, "latents": int,
    "init_sigma": float, "query_subset_size": int,
}
_TRAIN_KEYS = {
    "lr": float, "weight_decay": float, "beta1": float, "beta2": float,
    "steps": int, "batch_size": int, "mask_ratio": float,
    "warmup_frac": float, "seed": int, "mask_mode": str,
    "grad_clip": float, "checkpoint_every": int,
}
_RUN_KEYS = {
    "data": str, "label_column": str, "normalize": int, "out": str,
    "checkpoint": str, "metric": str, "task": str, "val_frac": float,
    "count": int, "scratch": int,
}
_ALL_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS, **_RUN_KEYS}


def _read_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _ALL_KEYS[key](value.strip())
    return values


def _merge_config(args: argparse.Namespace) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(_read_config_file(args.config))
    for key in _ALL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _parse_inline_spec(spec: str) -> dict:
    out = {}
    if spec:
        for item in spec.split(","):
            if "=" not in item:
                raise ConfigError(f"bad dataset option {item!r}")
            k, v = item.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _load_dataset(cfg: dict, seed: int) -> data_mod.Dataset:
    spec = cfg.get("data")
    if not spec:
        raise ConfigError("no dataset given (use --data)")
    scheme, _, rest = spec.partition(":")
    if scheme == "synthetic":
        opts = _parse_inline_spec(rest)
        try:
            return data_mod.gen_grouped_tokens(
                n=int(opts.get("n", 32)),
                num_groups=int(opts.get("groups", 8)),
                num_samples=int(opts.get("samples", 4096)),
                noise_sigma=float(opts.get("sigma", 0.01)),
                rng=Rng(seed).child(0xDA7A),
                shuffle_positions=bool(int(opts.get("shuffle", 0))),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if scheme == "csv":
        label = cfg.get("label_column")
        if label is not None and label.lstrip("-").isdigit():
            label = int(label)
        return data_mod.load_csv_tabular(rest, label_column=label,
                                         normalize=bool(cfg.get("normalize", 0)))
    if scheme == "text":
        n = cfg.get("seq_len")
        if n is None:
            raise ConfigError("text data needs seq_len")
        return data_mod.load_text_utf8(rest, int(n))
    raise ConfigError(f"unknown dataset scheme {scheme!r}")


def _dataset_hash(ds: data_mod.Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.tokens).tobytes())
    if ds.labels is not None:
        h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def _model_config(cfg: dict, ds: data_mod.Dataset) -> ModelConfig:
    kind = cfg.get("kind", "self")
    n = int(cfg.get("seq_len", ds.n))
    if n != ds.n:
        raise ConfigError(f"seq_len {n} does not match dataset n {ds.n}")
    try:
        return ModelConfig(
            kind=kind,
            n=n,
            layers=int(cfg.get("layers", 2)),
            d_embed=int(cfg.get("embed_dim", 64)),
            d_k=int(cfg.get("qk_dim", 64)),
            d_v=int(cfg.get("v_dim", 64)),
            heads=int(cfg.get("heads", 4)),
            latents=int(cfg.get("latents", max(1, n // 4))) if kind == "cross" else 0,
            discrete=ds.discrete,
            d_raw=1,
            init_sigma=float(cfg.get("init_sigma", 0.02)),
            query_subset_size=int(cfg.get("query_subset_size", 0)),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=float(cfg.get("lr", 1e-4)),
            weight_decay=float(cfg.get("weight_decay", 0.01)),
            beta1=float(cfg.get("beta1", 0.9)),
            beta2=float(cfg.get("beta2", 0.999)),
            steps=int(cfg.get("steps", 1000)),
            batch_size=int(cfg.get("batch_size", 256)),
            mask_ratio=float(cfg.get("mask_ratio", 0.2)),
            warmup_frac=float(cfg.get("warmup_frac", 0.01)),
            seed=int(cfg.get("seed", 0)),
            mask_mode=str(cfg.get("mask_mode", "guided")),
            grad_clip=cfg.get("grad_clip"),
            checkpoint_every=int(cfg.get("checkpoint_every", 0)),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _write_manifest(out_dir: Path, cfg: dict, ds: data_mod.Dataset) -> None:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines.append(f"data_sha256={_dataset_hash(ds)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_pretrain(args) -> int:
    cfg = _merge_config(args)
    mode = cfg.get("mask_mode", "guided")
    if mode == "none":
        raise ConfigError("pretraining requires masking; use mask_mode guided or random")
    seed = int(cfg.get("seed", 0))
    ds = _load_dataset(cfg, seed)
    model_cfg = _model_config(cfg, ds)
    train_cfg = _train_config(cfg)
    out_dir = Path(cfg.get("out", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    model = MaskedAutoencoder(model_cfg, Rng(seed))
    pretrain_loop(model, ds, train_cfg,
                  log_path=out_dir / "metrics.tsv",
                  ckpt_path=out_dir / "checkpoint.bin")
    _write_manifest(out_dir, cfg, ds)
    print(f"checkpoint={out_dir / 'checkpoint.bin'}")
    return 0


def _split_train_val(ds, val_frac: float, seed: int):
    val_frac = min(max(val_frac, 0.0), 0.9)
    if val_frac == 0.0:
        return ds, ds
    train, val = data_mod.split(ds, (1.0 - val_frac, val_frac), seed)
    return train, val


def _cmd_finetune(args) -> int:
    cfg = _merge_config(args)
    seed = int(cfg.get("seed", 0))
    ds = _load_dataset(cfg, seed)
    if ds.labels is None:
        raise ConfigError("fine-tuning needs labeled data")
    ckpt = cfg.get("checkpoint")
    if ckpt:
        model = MaskedAutoencoder.load(ckpt)
        if model.config.n != ds.n:
            raise ConfigError(
                f"checkpoint expects n={model.config.n}, dataset has n={ds.n}")
    elif cfg.get("scratch"):
        model = MaskedAutoencoder(_model_config(cfg, ds), Rng(seed))
    else:
        raise ConfigError("finetune needs --checkpoint or --scratch")
    task = cfg.get("task", "classify")
    train_cfg = _train_config(cfg)
    train_ds, val_ds = _split_train_val(ds, float(cfg.get("val_frac", 0.2)), seed)
    metrics = finetune_loop(model, train_ds, val_ds, train_cfg, task=task)
    out = cfg.get("out")
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / "checkpoint.bin")
    name = "accuracy" if task == "classify" else "rmse"
    print(f"metric={name} value={metrics[name]!r}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _merge_config(args)
    ds = _load_dataset(cfg, int(cfg.get("seed", 0)))
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("eval needs --checkpoint")
    model = MaskedAutoencoder.load(ckpt)
    if model.config.n != ds.n:
        raise ConfigError(f"checkpoint expects n={model.config.n}, dataset has n={ds.n}")
    metric = cfg.get("metric", "accuracy")
    try:
        value = evaluate(model, ds, metric)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(f"metric={metric} value={value!r}")
    return 0


def _printable(byte: int) -> str:
    ch = chr(byte)
    return ch if 0x20 <= byte < 0x7F else "."


def _cmd_mask_dump(args) -> int:
    cfg = _merge_config(args)
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("mask-dump needs --checkpoint")
    model = MaskedAutoencoder.load(ckpt)
    seed = int(cfg.get("seed", 0))
    cfg.setdefault("seq_len", model.config.n)
    ds = _load_dataset(cfg, seed)
    if ds.n != model.config.n:
        raise ConfigError(f"checkpoint expects n={model.config.n}, dataset has n={ds.n}")
    count = int(cfg.get("count", 4))
    ratio = float(cfg.get("mask_ratio", 0.2))
    out_dir = Path(cfg.get("out", "masks"))
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    side = int(np.sqrt(ds.n))
    for i in range(min(count, len(ds))):
        batch = ds.batch([i])
        with ag.no_grad():
            xhat = emb.embed(batch.tokens, model.embedding)
            scores = attn.attention_map(xhat, model.encoder).data[0]
        pad = batch.pads[0] if batch.pads[0].any() else None
        spec = masker.sample_mask(scores, ratio, rng.child(i), pad=pad,
                                  subset_size=model.config.query_subset_size or None)
        marks = []
        for j in range(ds.n):
            if j in set(spec.masked.tolist()):
                marks.append("#")
            elif batch.pads[0, j]:
                marks.append(" ")
            elif ds.discrete:
                marks.append(_printable(int(batch.tokens[0, j])))
            else:
                marks.append(".")
        (out_dir / f"mask_{i:03d}.txt").write_text("".join(marks) + "\n", encoding="utf-8")
        if side * side == ds.n:
            values = np.asarray(batch.tokens[0], dtype=np.float64)
            span = values.max() - values.min()
            gray = np.ones(ds.n) if span == 0 else (values - values.min()) / span
            pixels = (1 + np.floor(gray * 254)).astype(np.uint8)
            pixels[spec.masked] = 0
            header = f"P5\n{side} {side}\n255\n".encode("ascii")
            (out_dir / f"mask_{i:03d}.pgm").write_bytes(header + pixels.tobytes())
    print(f"wrote {min(count, len(ds))} dumps to {out_dir}")
    return 0


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def _cmd_bench_topk(args) -> int:
    n_list = [int(x) for x in args.n_list.split(",")]
    m, k, repeats = args.m, args.k, args.repeats
    if m <= 0 or k <= 0 or repeats <= 0 or any(n <= 0 for n in n_list):
        raise ConfigError("bench-topk parameters must be positive")
    rng = Rng(args.seed or 0)
    print(f"{'n':>8} {'iterative_ms':>14} {'approx_ms':>12} {'ratio':>8}")
    for n in n_list:
        if m * k > n:
            raise ConfigError(f"budget m*k={m * k} exceeds n={n}")
        rows = rng.normals((m, n))
        subset = np.arange(m)
        t_iter = _median_time(
            lambda: masker.iterative_oracle_mask(rows, subset, k), repeats)

        def approx():
            scores = masker.attention_mask_scores(rows, subset)
            masker.keep_top_k(scores, m * k)

        t_approx = _median_time(approx, repeats)
        ratio = t_iter / t_approx if t_approx > 0 else float("inf")
        print(f"{n:>8} {t_iter:>14.3f} {t_approx:>12.3f} {ratio:>8.2f}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _merge_config(args)
    n = int(cfg.get("seq_len", 8))
    if n > 16:
        raise ConfigError(f"gradcheck is for tiny configs (n <= 16), got n={n}")
    seed = int(cfg.get("seed", 0))
    kind = cfg.get("kind", "cross")
    model_cfg = ModelConfig(
        kind=kind,
        n=n,
        # one trunk block: two attention layers in total with the masked
        # first layer
        layers=int(cfg.get("layers", 1)),
        d_embed=int(cfg.get("embed_dim", 16)),
        d_k=int(cfg.get("qk_dim", 16)),
        d_v=int(cfg.get("v_dim", 16)),
        heads=int(cfg.get("heads", 2)),
        latents=max(2, n // 2) if kind == "cross" else 0,
        discrete=False,
        init_sigma=float(cfg.get("init_sigma", 0.02)),
    )
    rng = Rng(seed)
    model = MaskedAutoencoder(model_cfg, rng)
    # small-amplitude tokens keep the loss near 1e-5 so the central
    # differences are not dominated by float64 roundoff at epsilon 1e-6
    ds = data_mod.gen_grouped_tokens(n, max(2, n // 4), 2, 0.05, rng.child(1))
    batch = data_mod.Batch(tokens=ds.tokens * 0.01,
                           pads=np.zeros_like(ds.tokens, dtype=bool), labels=None)
    ratio = float(cfg.get("mask_ratio", 0.25))
    masks = [masker.sample_mask(
        np.asarray(s, dtype=np.float64), ratio, rng.child(10 + i))
        for i, s in enumerate(_raw_maps(model, batch))]
    params = list(model.parameters().values())

    def forward():
        return model.pretrain_forward(batch, ratio, masks=masks).loss

    err = grad_check(forward, params, epsilon=1e-6,
                     corrupt=0.1 if args.inject_fault else 0.0)
    print(f"max_rel_error={err:.6e}")
    return 0 if err < 1e-5 else 3


def _raw_maps(model: MaskedAutoencoder, batch) -> list[np.ndarray]:
    with ag.no_grad():
        xhat = emb.embed(batch.tokens, model.embedding)
        scores = attn.attention_map(xhat, model.encoder).data
    return [scores[i] for i in range(scores.shape[0])]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    for key, typ in _ALL_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnmae")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("pretrain", _cmd_pretrain), ("finetune", _cmd_finetune),
                     ("eval", _cmd_eval), ("mask-dump", _cmd_mask_dump),
                     ("gradcheck", _cmd_gradcheck)]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "gradcheck":
            p.add_argument("--inject-fault", action="store_true",
                           help="corrupt one analytic gradient to probe the checker")
    bench = sub.add_parser("bench-topk")
    bench.add_argument("--n-list", default="1024,4096,36864")
    bench.add_argument("--m", type=int, default=64)
    bench.add_argument("--k", type=int, default=16)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(fn=_cmd_bench_topk)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, data_mod.CsvParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures get a distinct exit code
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
