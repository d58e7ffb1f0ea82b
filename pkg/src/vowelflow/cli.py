"""Command-line pipeline: corpus synthesis, flow training, latent analyses.

The subcommands wire the library into one workflow.  `synth-data` and
`prepare` build a spectrogram corpus, `train` fits the flow by maximum
likelihood, and the analysis commands (`encode`, `sample`, `interpolate`,
`denoise`, `lda`, `gauss-report`, `reconstruct`, `grad-audit`) operate on
the corpus plus a trained checkpoint.

Configuration is a four-section tree (data, synth, flow, train) where every
key has a default.  A JSON file given with --config overrides the defaults,
and dotted flags such as `--train.lr 3e-3` override the file.  Unknown
sections or keys are rejected before any work starts.  Every artifact embeds
the merged config so a run can be reproduced from the artifact alone.

Exit codes: 0 on success, 1 on a usage error (bad flags, malformed or
unknown config keys), 2 on a runtime error (missing files, divergence,
failed gradient audit).  Diagnostics go to standard error; data goes to
files under --out-dir, or to standard output for `grad-audit`.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    CorpusReader,
    DatasetConfig,
    SyntheticSpec,
    build_corpus,
    load_manifest,
    FULL_FRAMES,
    FREQ_ZERO_BANDS,
)
from .flow import FlowConfig
from .latent import (
    encode_batch,
    denoise,
    gaussianity_report,
    interpolate,
    lda_fit,
    noise_displacement,
    project_scatter,
    sample,
    scatter_pair,
    write_csv,
    write_image_strip,
)
from .numerics import Rng, read_tensor, write_tensor
from .signal import StftConfig, denormalize, istft_phase_borrow, read_wav, stft, write_wav
from .train import TrainConfig, build_model, grad_audit, load_checkpoint, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad invocation: flags, config keys, or value syntax."""


# ---------------------------------------------------------------------------
# configuration tree

_NONE_WORDS = ("none", "null", "")


def _as_int(value):
    if isinstance(value, bool):
        raise ValueError("expected an integer")
    if isinstance(value, int):
        return value
    return int(str(value), 10)


def _as_float(value):
    if isinstance(value, bool):
        raise ValueError("expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    return float(str(value))


def _as_opt_float(value):
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in _NONE_WORDS:
        return None
    return _as_float(value)


def _as_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


# Section -> key -> (default, coercion).  This table is the whole config
# surface: dotted flags are generated from it and unknown keys are rejected
# against it.
_SCHEMA = {
    "data": {
        "sample_rate": (16000, _as_int),
        "window_ms": (25.0, _as_float),
        "hop_ms": (1.0, _as_float),
        "fft_size": (512, _as_int),
        "image_size": (32, _as_int),
        "noise_snr_db": (None, _as_opt_float),
        "train_fraction": (0.9, _as_float),
        "write_wavs": (False, _as_bool),
    },
    "synth": {
        "n_speakers": (4, _as_int),
        "draws_per_vowel": (10, _as_int),
    },
    "flow": {
        "levels": (3, _as_int),
        "depth": (2, _as_int),
        "coupling_width": (32, _as_int),
    },
    "train": {
        "steps": (500, _as_int),
        "batch_size": (16, _as_int),
        "lr": (1e-4, _as_float),
        "beta1": (0.9, _as_float),
        "beta2": (0.999, _as_float),
        "eps": (1e-8, _as_float),
        "clip_norm": (50.0, _as_float),
        "jitter": (0.01, _as_float),
        "checkpoint_every": (100, _as_int),
    },
}


class RunConfig:
    """Merged configuration: defaults, then JSON file, then dotted flags."""

    def __init__(self, seed: int, sections: dict):
        self.seed = seed
        self.sections = sections

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def echo(self) -> str:
        """One-line JSON of the merged config, embedded in artifacts."""
        doc = {"seed": self.seed}
        doc.update(self.sections)
        return json.dumps(doc, sort_keys=True, separators=(", ", ": "))

    def stft_config(self) -> StftConfig:
        d = self.sections["data"]
        window = round(d["sample_rate"] * d["window_ms"] / 1000.0)
        hop = round(d["sample_rate"] * d["hop_ms"] / 1000.0)
        return StftConfig(window_len=window, hop=hop, fft_size=d["fft_size"])

    def dataset_config(self) -> DatasetConfig:
        d = self.sections["data"]
        return DatasetConfig(
            image_size=d["image_size"],
            stft=self.stft_config(),
            noise_snr_db=d["noise_snr_db"],
            train_fraction=d["train_fraction"],
            write_wavs=d["write_wavs"],
        )

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.sections["synth"]
        return SyntheticSpec(
            n_speakers=s["n_speakers"], draws_per_vowel=s["draws_per_vowel"]
        )

    def flow_config(self) -> FlowConfig:
        f = self.sections["flow"]
        size = self.sections["data"]["image_size"]
        return FlowConfig(
            levels=f["levels"],
            depth=f["depth"],
            coupling_width=f["coupling_width"],
            input_shape=(1, size, size),
        )

    def train_config(self) -> TrainConfig:
        t = self.sections["train"]
        return TrainConfig(
            steps=t["steps"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            eps=t["eps"],
            clip_norm=t["clip_norm"],
            jitter=t["jitter"],
            seed=self.seed,
            checkpoint_every=t["checkpoint_every"],
        )


def _set_key(sections: dict, section: str, key: str, value, origin: str) -> None:
    if section not in _SCHEMA:
        raise UsageError(f"{origin}: unknown config section {section!r}")
    if key not in _SCHEMA[section]:
        raise UsageError(f"{origin}: unknown config key {section}.{key}")
    _, coerce = _SCHEMA[section][key]
    try:
        sections[section][key] = coerce(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{origin}: bad value for {section}.{key}: {exc}") from exc


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Resolve defaults, then the --config file, then dotted flag overrides."""
    sections = {
        name: {key: default for key, (default, _) in keys.items()}
        for name, keys in _SCHEMA.items()
    }
    seed = 0

    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config file {config_path}: expected a JSON object")
        for section, body in doc.items():
            if section == "seed":
                try:
                    seed = _as_int(body)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"{config_path}: bad seed: {exc}") from exc
                continue
            if not isinstance(body, dict):
                raise UsageError(
                    f"{config_path}: section {section!r} must be a JSON object"
                )
            for key, value in body.items():
                _set_key(sections, section, key, value, config_path)

    for dest, value in vars(args).items():
        if "." in dest:
            section, key = dest.split(".", 1)
            _set_key(sections, section, key, value, f"--{dest}")

    if getattr(args, "seed", None) is not None:
        seed = args.seed
    return RunConfig(seed=seed, sections=sections)


def parse_sweep(text: str):
    """Parse `start:stop:step` (inclusive endpoints) or a single value.

    `0.1:0.9:0.1` yields the nine points 0.1, 0.2, ..., 0.9; the span must
    be an integer number of steps.
    """
    parts = text.split(":")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad sweep {text!r}: {exc}") from exc
    if len(values) == 1:
        return np.array(values)
    if len(values) != 3:
        raise UsageError(f"bad sweep {text!r}: expected VALUE or START:STOP:STEP")
    start, stop, step = values
    if step <= 0:
        raise UsageError(f"bad sweep {text!r}: step must be positive")
    if stop < start:
        raise UsageError(f"bad sweep {text!r}: stop is below start")
    count = int(round((stop - start) / step)) + 1
    if abs(start + (count - 1) * step - stop) > 1e-9 * max(1.0, abs(stop)):
        raise UsageError(f"bad sweep {text!r}: span is not a whole number of steps")
    return start + step * np.arange(count)


# ---------------------------------------------------------------------------
# shared command plumbing

def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _corpus_dir(args: argparse.Namespace, out: Path) -> Path:
    data = getattr(args, "data", None)
    return Path(data) if data is not None else out


def _checkpoint_path(args: argparse.Namespace, out: Path) -> Path:
    ckpt = getattr(args, "checkpoint", None)
    return Path(ckpt) if ckpt is not None else out / "checkpoint.fsck"


def _split_indices(manifest, split: str) -> list[int]:
    if split == "train":
        indices = manifest.train_indices()
    elif split == "eval":
        indices = manifest.eval_indices()
    else:
        indices = list(range(len(manifest.entries)))
    if not indices:
        raise ValueError(f"{split} split is empty")
    return indices


def _find_segment(manifest, utterance: str, noisy: bool) -> int:
    want = "noisy" if noisy else "clean"
    for i, entry in enumerate(manifest.entries):
        rec = entry.record
        if rec.utterance_id == utterance and (rec.noise_snr_db is not None) == noisy:
            return i
    raise ValueError(f"no {want} segment with utterance id {utterance!r}")


def _config_comment(cfg: RunConfig) -> str:
    return f"config {cfg.echo()}"


def _nats_per_dim(lnp: np.ndarray, dim: int) -> np.ndarray:
    return -np.asarray(lnp) / dim


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    manifest = build_corpus(
        cfg.synthetic_spec(), cfg.dataset_config(), Rng(cfg.seed), out
    )
    n_train = len(manifest.train_indices())
    _info(
        f"synth-data: {len(manifest.entries)} segments "
        f"({n_train} train) in {out}"
    )
    return EXIT_OK


def cmd_prepare(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    manifest = build_corpus(
        args.corpus_root, cfg.dataset_config(), Rng(cfg.seed), out
    )
    n_train = len(manifest.train_indices())
    _info(
        f"prepare: {len(manifest.entries)} segments "
        f"({n_train} train) in {out}"
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    with CorpusReader(corpus) as reader:
        pixels = reader.load(_split_indices(manifest, "train"))

    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        model = resume.model
    else:
        model = build_model(cfg.flow_config(), cfg.seed)

    result = train_loop(
        model,
        pixels,
        cfg.train_config(),
        out,
        resume=resume,
        stats=manifest.stats,
        comment=_config_comment(cfg),
        log=_info,
    )
    _info(
        f"train: step {result.final_step}, "
        f"final loss {result.final_loss:.6f} nats/dim, "
        f"checkpoint {result.checkpoint_path}"
    )
    return EXIT_OK


def cmd_encode(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    loaded = load_checkpoint(_checkpoint_path(args, out))
    indices = _split_indices(manifest, args.split)
    with CorpusReader(corpus) as reader:
        pixels = reader.load(indices)

    z, lnp = encode_batch(loaded.model, pixels)
    nats = _nats_per_dim(lnp, loaded.model.code_size)
    write_tensor(out / "codes.fstn", z)
    rows = []
    for j, i in enumerate(indices):
        rec = manifest.entries[i].record
        rows.append(
            (
                i,
                rec.utterance_id,
                rec.speaker_id,
                rec.gender,
                rec.vowel,
                int(rec.noise_snr_db is not None),
                lnp[j],
                nats[j],
            )
        )
    write_csv(
        out / "codes.csv",
        ["index", "utterance", "speaker", "gender", "vowel", "noisy",
         "ln_likelihood", "nats_per_dim"],
        rows,
        comment=_config_comment(cfg),
    )
    _info(
        f"encode: {len(indices)} segments ({args.split} split), "
        f"mean {np.mean(nats):.4f} nats/dim"
    )
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    loaded = load_checkpoint(_checkpoint_path(args, out))
    z, images = sample(loaded.model, Rng(cfg.seed), args.n, args.temperature)
    _, lnp = encode_batch(loaded.model, images)
    nats = _nats_per_dim(lnp, loaded.model.code_size)

    write_tensor(out / "samples.fstn", images)
    write_image_strip(out / "samples.pgm", images[:, 0])
    rows = [(i, args.temperature, nats[i]) for i in range(args.n)]
    write_csv(
        out / "samples.csv",
        ["index", "temperature", "nats_per_dim"],
        rows,
        comment=_config_comment(cfg),
    )
    _info(f"sample: {args.n} draws at temperature {args.temperature}")
    return EXIT_OK


def cmd_interpolate(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    loaded = load_checkpoint(_checkpoint_path(args, out))
    alphas = parse_sweep(args.alphas)

    ia = _find_segment(manifest, args.a, noisy=False)
    ib = _find_segment(manifest, args.b, noisy=False)
    with CorpusReader(corpus) as reader:
        pixels = reader.load([ia, ib])
    z, _ = encode_batch(loaded.model, pixels)

    result = interpolate(loaded.model, z[0], z[1], alphas)
    _, lnp = encode_batch(loaded.model, result.images)
    nats = _nats_per_dim(lnp, loaded.model.code_size)

    write_tensor(out / "interpolation.fstn", result.images)
    write_image_strip(out / "interpolation.pgm", result.images[:, 0])
    rows = [(float(a), nats[k]) for k, a in enumerate(result.alphas)]
    write_csv(
        out / "interpolation.csv",
        ["alpha", "nats_per_dim"],
        rows,
        comment=_config_comment(cfg),
    )
    _info(
        f"interpolate: {args.a} -> {args.b}, "
        f"{len(result.alphas)} points in [{alphas[0]:g}, {alphas[-1]:g}]"
    )
    return EXIT_OK


def cmd_denoise(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    loaded = load_checkpoint(_checkpoint_path(args, out))
    betas = parse_sweep(args.beta_sweep)

    pairs = manifest.clean_noisy_pairs()
    if not pairs:
        raise ValueError("corpus has no clean/noisy pairs (set data.noise_snr_db)")
    train_utts = set(manifest.train_utterances)

    def is_train(pair):
        return manifest.entries[pair[0]].record.utterance_id in train_utts

    fit_pairs = [p for p in pairs if is_train(p)] or pairs

    if args.utt is not None:
        target_noisy = _find_segment(manifest, args.utt, noisy=True)
        target_clean = _find_segment(manifest, args.utt, noisy=False)
    else:
        held_out = [p for p in pairs if not is_train(p)]
        if not held_out:
            raise ValueError("no held-out noisy segment; pass --utt")
        target_clean, target_noisy = held_out[0]

    with CorpusReader(corpus) as reader:
        clean_px = reader.load([p[0] for p in fit_pairs])
        noisy_px = reader.load([p[1] for p in fit_pairs])
        target_px = reader.load([target_noisy, target_clean])

    z_clean, _ = encode_batch(loaded.model, clean_px)
    z_noisy, _ = encode_batch(loaded.model, noisy_px)
    snr = manifest.config.get("noise_snr_db")
    xi = noise_displacement(z_clean, z_noisy, snr_db=snr)

    z_target, _ = encode_batch(loaded.model, target_px)
    result = denoise(loaded.model, z_target[0], xi, betas)
    _, lnp = encode_batch(loaded.model, result.images)
    nats = _nats_per_dim(lnp, loaded.model.code_size)
    mse = np.mean(
        (result.images - target_px[1][None]) ** 2, axis=(1, 2, 3)
    )

    write_tensor(out / "denoised.fstn", result.images)
    write_image_strip(out / "denoised.pgm", result.images[:, 0])
    rows = [
        (float(b), nats[k], float(mse[k])) for k, b in enumerate(result.betas)
    ]
    write_csv(
        out / "denoise.csv",
        ["beta", "nats_per_dim", "mse_to_clean"],
        rows,
        comment=_config_comment(cfg),
    )
    best = int(np.argmin(mse))
    utt = manifest.entries[target_noisy].record.utterance_id
    _info(
        f"denoise: {utt}, displacement over {len(fit_pairs)} pairs "
        f"(norm {xi.norm:.4f}), best beta {result.betas[best]:g} "
        f"(mse {mse[best]:.6f} vs {mse[0]:.6f} at beta 0)"
    )
    return EXIT_OK


def cmd_lda(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    split = set(_split_indices(manifest, args.split))

    def class_indices(value: str) -> list[int]:
        selector = {args.by: value, "noisy": False}
        indices = [i for i in manifest.select(**selector) if i in split]
        if len(indices) < 2:
            raise ValueError(
                f"{args.by}={value!r} has {len(indices)} segments; need at least 2"
            )
        return indices

    idx_a = class_indices(args.class_a)
    idx_b = class_indices(args.class_b)
    with CorpusReader(corpus) as reader:
        px_a = reader.load(idx_a)
        px_b = reader.load(idx_b)

    if args.space == "code":
        loaded = load_checkpoint(_checkpoint_path(args, out))
        vec_a, _ = encode_batch(loaded.model, px_a)
        vec_b, _ = encode_batch(loaded.model, px_b)
    else:
        vec_a = px_a.reshape(px_a.shape[0], -1)
        vec_b = px_b.reshape(px_b.shape[0], -1)

    probe = lda_fit(vec_a, vec_b, labels=(args.class_a, args.class_b))
    points = project_scatter(probe, np.concatenate([vec_a, vec_b]))
    labels = [args.class_a] * len(idx_a) + [args.class_b] * len(idx_b)
    rows = [(points[i, 0], points[i, 1], labels[i]) for i in range(len(labels))]
    write_csv(
        out / "lda_scatter.csv",
        ["p1", "p2", "label"],
        rows,
        comment=_config_comment(cfg),
    )

    report = {
        "by": args.by,
        "class_a": args.class_a,
        "class_b": args.class_b,
        "space": args.space,
        "split": args.split,
        "n_a": len(idx_a),
        "n_b": len(idx_b),
        "fisher_ratio": probe.fisher_ratio,
        "shrinkage": probe.shrinkage,
        "config": json.loads(cfg.echo()),
    }
    (out / "lda.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _info(
        f"lda: {args.by} {args.class_a} vs {args.class_b} in {args.space} space, "
        f"fisher ratio {probe.fisher_ratio:.6g}"
    )
    return EXIT_OK


def cmd_gauss_report(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    loaded = load_checkpoint(_checkpoint_path(args, out))
    indices = _split_indices(manifest, args.split)
    with CorpusReader(corpus) as reader:
        pixels = reader.load(indices)

    codes, _ = encode_batch(loaded.model, pixels)
    flat_px = pixels.reshape(pixels.shape[0], -1)
    rng = Rng(cfg.seed)

    def pick_dims(total: int, stream: Rng):
        if args.dims is None or args.dims >= total:
            return None
        return np.sort(stream.permutation(total)[: args.dims])

    spaces = {
        "code": (codes, pick_dims(codes.shape[1], rng.spawn(0)), rng.spawn(2)),
        "pixels": (flat_px, pick_dims(flat_px.shape[1], rng.spawn(1)), rng.spawn(3)),
    }

    stat_rows, scatter_rows, summary = [], [], {}
    for name, (vectors, dims, scatter_rng) in spaces.items():
        report = gaussianity_report(vectors, dims=dims)
        for k, dim in enumerate(report.dims):
            stat_rows.append(
                (
                    name,
                    int(dim),
                    report.skewness[k],
                    report.excess_kurtosis[k],
                    int(report.degenerate[k]),
                )
            )
        pair = scatter_pair(vectors, scatter_rng)
        for x, y in pair.points:
            scatter_rows.append((name, x, y))
        summary[name] = {
            "n_samples": report.n_samples,
            "n_dims": len(report.dims),
            "n_degenerate": int(report.degenerate.sum()),
            "mean_abs_skewness": report.mean_abs_skewness,
            "mean_abs_excess_kurtosis": report.mean_abs_excess_kurtosis,
            "scatter_dims": [pair.dim_i, pair.dim_j],
        }

    write_csv(
        out / "gaussianity.csv",
        ["space", "dim", "skewness", "excess_kurtosis", "degenerate"],
        stat_rows,
        comment=_config_comment(cfg),
    )
    write_csv(
        out / "gauss_scatter.csv",
        ["space", "x", "y"],
        scatter_rows,
        comment=_config_comment(cfg),
    )
    summary["config"] = json.loads(cfg.echo())
    (out / "gaussianity.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _info(
        "gauss-report: mean |excess kurtosis| "
        f"code {summary['code']['mean_abs_excess_kurtosis']:.4f}, "
        f"pixels {summary['pixels']['mean_abs_excess_kurtosis']:.4f}"
    )
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    corpus = _corpus_dir(args, out)
    manifest = load_manifest(corpus)
    index = _find_segment(manifest, args.utt, noisy=args.noisy)
    entry = manifest.entries[index]

    with CorpusReader(corpus) as reader:
        wav_path = reader.wav_path(index)
        if not wav_path.exists():
            raise ValueError(
                f"no waveform for {args.utt!r}; rebuild the corpus with "
                "data.write_wavs true"
            )
        if getattr(args, "from_", None) is not None:
            stack = read_tensor(args.from_)
            if not 0 <= args.index < stack.shape[0]:
                raise ValueError(
                    f"--index {args.index} out of range for {stack.shape[0]} images"
                )
            image = stack[args.index]
        else:
            image = reader.pixels(index)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]

    size = image.shape[0]
    if image.shape != (size, size) or FULL_FRAMES % size != 0:
        raise ValueError(f"image shape {image.shape} does not map to a spectrogram")
    factor = FULL_FRAMES // size
    big = np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)
    mag = denormalize(big, manifest.stats)[:, : FULL_FRAMES - FREQ_ZERO_BANDS]

    stft_echo = manifest.config["stft"]
    waveform = read_wav(wav_path)
    phase = stft(
        waveform,
        window_len=stft_echo["window_len"],
        hop=stft_echo["hop"],
        fft_size=stft_echo["fft_size"],
    )
    frames = phase.frames.shape[0]
    if frames > FULL_FRAMES:
        raise ValueError(
            f"phase source has {frames} frames; expected at most {FULL_FRAMES}"
        )
    audio = istft_phase_borrow(
        mag[:frames],
        phase,
        window_len=stft_echo["window_len"],
        hop=stft_echo["hop"],
        sample_rate=waveform.sample_rate,
    )
    suffix = "_noisy" if args.noisy else ""
    target = out / f"recon_{args.utt}{suffix}.wav"
    write_wav(target, audio)
    _info(f"reconstruct: {args.utt} -> {target} ({frames} frames)")
    return EXIT_OK


def cmd_grad_audit(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    flow_config = cfg.flow_config()
    model = build_model(flow_config, cfg.seed)
    rng = Rng(cfg.seed)

    # The coupling output layers initialize to zero, which would leave the
    # hidden convolutions with trivially zero gradients; nudge them so the
    # audit exercises every parameter path.
    perturb = rng.spawn(2)
    for name, param in model.params().items():
        if name.endswith("coupling.w3") or name.endswith("coupling.b3"):
            param += 0.1 * perturb.standard_normal(param.shape)

    c, h, w = flow_config.input_shape
    batch = rng.spawn(1).standard_normal((args.batch, c, h, w))
    model.forward(batch, init_actnorm=True)
    model.mark_actnorms_initialized()

    report = grad_audit(
        model,
        batch,
        h=args.h,
        tolerance=args.tolerance,
        entries_per_param=args.entries,
    )
    print("param,max_rel_err")
    for name, err in sorted(report.group_max().items()):
        print(f"{name},{err:.6e}")
    worst = report.worst
    status = "passed" if report.passed else "FAILED"
    _info(
        f"grad-audit: {status}, max rel err {report.max_rel_err:.3e} "
        f"(tolerance {report.tolerance:g}) at {worst.name}{list(worst.index)}"
    )
    if not report.passed:
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly

class _Parser(argparse.ArgumentParser):
    # Exact flag names only: prefix abbreviation would make --data ambiguous
    # against the dotted --data.* overrides.
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.format_usage().rstrip()}\n{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed", type=int, default=argparse.SUPPRESS,
        help="base seed for every derived stream (default 0)",
    )
    parser.add_argument(
        "--config", default=argparse.SUPPRESS, metavar="FILE",
        help="JSON config file overriding the defaults",
    )
    parser.add_argument(
        "--out-dir", default=argparse.SUPPRESS, metavar="DIR",
        help="artifact directory, also the default corpus location (default out)",
    )
    for section, keys in _SCHEMA.items():
        for key, (default, _) in keys.items():
            parser.add_argument(
                f"--{section}.{key}",
                dest=f"{section}.{key}",
                default=argparse.SUPPRESS,
                metavar="V",
                help=f"override {section}.{key} (default {default})",
            )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="vowelflow",
        description="Normalizing-flow pipeline over vowel spectrograms.",
    )
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    command("synth-data", cmd_synth_data, "build the synthetic vowel corpus")

    p = command("prepare", cmd_prepare, "ingest a real corpus tree")
    p.add_argument("--corpus-root", required=True, metavar="DIR",
                   help="root with wav/ and aligned phone label files")

    p = command("train", cmd_train, "fit the flow by maximum likelihood")
    p.add_argument("--data", metavar="DIR", help="corpus directory (default out dir)")
    p.add_argument("--resume", metavar="FILE", help="checkpoint to continue from")

    p = command("encode", cmd_encode, "encode corpus segments to latent codes")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--split", choices=("train", "eval", "all"), default="all")

    p = command("sample", cmd_sample, "decode Gaussian draws to spectrograms")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.add_argument("--temperature", type=float, default=1.0)

    p = command("interpolate", cmd_interpolate,
                "decode convex combinations of two segment codes")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--a", required=True, metavar="UTT", help="first utterance id")
    p.add_argument("--b", required=True, metavar="UTT", help="second utterance id")
    p.add_argument("--alphas", default="0.1:0.9:0.1", metavar="SWEEP",
                   help="alpha sweep start:stop:step (default 0.1:0.9:0.1)")

    p = command("denoise", cmd_denoise,
                "subtract the scaled noise displacement from a noisy code")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--utt", metavar="UTT",
                   help="noisy target (default: first held-out pair)")
    p.add_argument("--beta-sweep", default="0:0.8:0.1", metavar="SWEEP",
                   help="beta sweep start:stop:step (default 0:0.8:0.1)")

    p = command("lda", cmd_lda, "two-class discriminant probe and scatter export")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--by", choices=("vowel", "gender", "speaker"), default="vowel")
    p.add_argument("--class-a", required=True, metavar="VALUE")
    p.add_argument("--class-b", required=True, metavar="VALUE")
    p.add_argument("--space", choices=("code", "pixels"), default="code")
    p.add_argument("--split", choices=("train", "eval", "all"), default="all")

    p = command("gauss-report", cmd_gauss_report,
                "per-dimension Gaussianity statistics in both spaces")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--split", choices=("train", "eval", "all"), default="all")
    p.add_argument("--dims", type=int, default=64,
                   help="dimensions sampled per space (default 64)")

    p = command("reconstruct", cmd_reconstruct,
                "resynthesize a waveform from a spectrogram via phase borrowing")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--utt", required=True, metavar="UTT",
                   help="segment supplying the phase (and default magnitude)")
    p.add_argument("--noisy", action="store_true",
                   help="use the noisy twin of --utt")
    p.add_argument("--from", dest="from_", metavar="FILE",
                   help="FSTN stack supplying the magnitude image")
    p.add_argument("--index", type=int, default=0,
                   help="image index within --from (default 0)")

    p = command("grad-audit", cmd_grad_audit,
                "finite-difference check of the analytic gradients")
    p.add_argument("--h", type=float, default=1e-5, help="step size")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=4,
                   help="entries probed per parameter tensor")
    p.add_argument("--batch", type=int, default=2,
                   help="random batch size for the audit")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help exits through argparse
        return int(exc.code or 0)

    if getattr(args, "command", None) is None:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = load_run_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(getattr(args, "out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(cfg, args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
