"""Pipeline orchestration: subcommands wiring synth/ingest -> field ->
codec -> bnp -> analysis, driven by one JSON configuration.

Every stage writes its artifacts plus a manifest (config snapshot, seed,
input/output hashes, version) under the configured output directory, and
every random draw derives from the single config seed, so a repeated run
reproduces byte-identical files. ``LANESCOPE_THREADS`` caps the worker
count for the per-frame field solves (0 or unset = auto); results do not
depend on it.

Exit codes: 0 success, 1 domain error (error name on stderr), 2 usage
error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__, analysis, bnp, codec, field, ingest, synth
from .core import FieldParams, RoiConfig
from .errors import ConfigError, LanescopeError, PathNotFound
from .ingest import ColumnMap, Region

SUBCOMMANDS = ("synth", "ingest", "fields", "train-codec", "encode",
               "segment", "analyze", "pipeline")

# Per-stage seed streams derived from the config seed.
_STAGE_STREAM = {"synth": 0, "train-codec": 3, "segment": 5, "analyze": 6}

_SECTION_KEYS = {
    "io": {"out_dir", "tracks"},
    "synth": {"scenarios", "lane_count", "duration", "rate", "lane_width", "speed_jitter"},
    "ingest": {"columns", "source_rate_hz", "target_rate_hz", "buffer_s"},
    "roi": {"d_front", "d_behind", "d_side", "dx", "dy"},
    "field": {"A", "sigma_x", "sigma_y", "lambda_x", "lambda_y", "xi_x", "xi_y",
              "jitter", "include_ego_anchor", "skewed", "write_csv"},
    "codec": {"encoder", "batch_size", "max_iterations", "lr", "beta1", "beta2",
              "eps", "lr_decay", "stop_loss", "auto_scale"},
    "bnp": {"gamma", "alpha_plus_kappa", "rho", "L", "nu0", "iterations",
            "hyper_resampling"},
    "analysis": {"regions", "fractions", "curve_seeds", "curve_iterations"},
}


@dataclass
class PipelineConfig:
    seed: int
    out_dir: Path
    tracks: str | None
    synth_opts: dict
    cmap: ColumnMap
    buffer_s: float
    roi: RoiConfig
    field_params: FieldParams
    skewed: bool
    write_csv: bool
    encoder: str
    train: codec.TrainConfig
    hyper: bnp.HdpHmmHyper
    bnp_iterations: int
    regions: list[Region]
    fractions: list[float]
    curve_seeds: list[int]
    curve_iterations: int
    raw: dict = dc_field(default_factory=dict, repr=False)

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, _STAGE_STREAM.get(stage, 99)])


def _reject_unknown(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_config(path, overrides: list[str] = ()) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise PathNotFound(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in overrides:
        raw = _apply_override(raw, item)
    return _build_config(raw)


def _apply_override(raw: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    dotted, text = item.split("=", 1)
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {dotted!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-object")
    node[keys[-1]] = value
    return raw


def _build_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, set(_SECTION_KEYS) | {"seed"}, "config root")
    if "seed" not in raw:
        raise ConfigError("config must provide a seed")
    for section, allowed in _SECTION_KEYS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section {section!r} must be an object")
            _reject_unknown(raw[section], allowed, f"section {section!r}")

    io = raw.get("io", {})
    if "out_dir" not in io:
        raise ConfigError("io.out_dir is required")
    ing = raw.get("ingest", {})
    columns = ing.get("columns", {})
    _reject_unknown(columns, {"frame", "vehicle_id", "x", "y", "vx", "vy",
                              "ax", "ay", "lane_id"}, "ingest.columns")
    cmap = ColumnMap(**columns,
                     source_rate_hz=int(ing.get("source_rate_hz", 25)),
                     target_rate_hz=int(ing.get("target_rate_hz", 5)))

    fld = dict(raw.get("field", {}))
    skewed = bool(fld.pop("skewed", True))
    write_csv = bool(fld.pop("write_csv", False))
    cod = dict(raw.get("codec", {}))
    encoder = cod.pop("encoder", "linear")
    if encoder not in ("linear", "cae"):
        raise ConfigError(f"codec.encoder must be 'linear' or 'cae', got {encoder!r}")
    b = dict(raw.get("bnp", {}))
    bnp_iterations = int(b.pop("iterations", 500))
    ana = raw.get("analysis", {})
    try:
        regions = [Region(r) for r in ana.get("regions", ["ALL", "LANE_CHANGE"])]
    except ValueError as exc:
        raise ConfigError(f"bad region name: {exc}") from exc

    try:
        return PipelineConfig(
            seed=int(raw["seed"]),
            out_dir=Path(io["out_dir"]),
            tracks=io.get("tracks"),
            synth_opts=dict(raw.get("synth", {})),
            cmap=cmap,
            buffer_s=float(ing.get("buffer_s", 2.0)),
            roi=RoiConfig(**raw.get("roi", {})),
            field_params=FieldParams(**fld),
            skewed=skewed,
            write_csv=write_csv,
            encoder=encoder,
            train=codec.TrainConfig(seed=int(raw["seed"]), **cod),
            hyper=bnp.HdpHmmHyper(**b),
            bnp_iterations=bnp_iterations,
            regions=regions,
            fractions=[float(f) for f in ana.get("fractions", [])],
            curve_seeds=[int(s) for s in ana.get("curve_seeds", [0, 1, 2])],
            curve_iterations=int(ana.get("curve_iterations", 200)),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def worker_count() -> int:
    """Resolve LANESCOPE_THREADS (0 or unset = auto)."""
    text = os.environ.get("LANESCOPE_THREADS", "0")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"LANESCOPE_THREADS must be an integer, got {text!r}") from None
    if n < 0:
        raise ConfigError("LANESCOPE_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


# manifest helpers -----------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(cfg: PipelineConfig, stage: str,
                    inputs: list[Path], outputs: list[Path]) -> None:
    manifest_dir = cfg.out_dir / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.raw,
        "inputs": {str(p): _sha256(p) for p in sorted(inputs)},
        "outputs": {str(p): _sha256(p) for p in sorted(outputs)},
    }
    path = manifest_dir / f"{stage.replace('-', '_')}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise PathNotFound(path)
    return path


# stages ---------------------------------------------------------------------

def _tracks_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.tracks) if cfg.tracks else cfg.out_dir / "tracks"


def stage_synth(cfg: PipelineConfig) -> list[Path]:
    opts = cfg.synth_opts
    rng = cfg.rng("synth")
    specs = synth.sample_scenario_specs(
        int(opts.get("scenarios", 8)), rng,
        lane_count=int(opts.get("lane_count", 3)),
        duration=int(opts.get("duration", 750)),
        rate=float(opts.get("rate", 25.0)),
        lane_width=float(opts.get("lane_width", 4.0)))
    out = _tracks_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, spec in enumerate(specs):
        if opts.get("speed_jitter"):
            spec = synth.ScenarioSpec(
                vehicles=spec.vehicles, lane_count=spec.lane_count,
                lane_width=spec.lane_width, duration=spec.duration,
                rate=spec.rate, speed_jitter=float(opts["speed_jitter"]))
        trajectories = synth.gen_scenario(spec, seed=cfg.seed + idx)
        path = out / f"scenario_{idx:03d}.csv"
        ingest.write_tracks_csv(trajectories, path, cfg.cmap)
        written.append(path)
    _write_manifest(cfg, "synth", [], written)
    return written


def _sequence_index(cfg: PipelineConfig) -> list[dict]:
    path = _require(cfg.out_dir / "sequences.json")
    return json.loads(path.read_text(encoding="utf-8"))


def stage_ingest(cfg: PipelineConfig) -> list[Path]:
    tracks_dir = _require(_tracks_dir(cfg))
    track_files = sorted(tracks_dir.glob("*.csv"))
    if not track_files:
        raise PathNotFound(tracks_dir / "*.csv")
    scenes_dir = cfg.out_dir / "scenes"
    regions_dir = cfg.out_dir / "regions"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    regions_dir.mkdir(parents=True, exist_ok=True)

    index, outputs = [], []
    for track_path in track_files:
        trajectories = ingest.parse_tracks(track_path, cfg.cmap)
        trajectories = ingest.normalize(trajectories)
        trajectories = [ingest.downsample(t, cfg.cmap) for t in trajectories]
        for traj in trajectories:
            lanes = {s.lane_id for s in traj}
            changes = sum(1 for a, b in zip(traj, traj[1:]) if a.lane_id != b.lane_id)
            if len(lanes) < 2 or changes != 1:
                continue  # egos are the vehicles with exactly one lane change
            labels = ingest.delineate_regions(traj, cfg.buffer_s,
                                              rate_hz=cfg.cmap.target_rate_hz)
            scenes = ingest.extract_scenes(traj, trajectories, cfg.roi)
            name = f"{track_path.stem}_ego{traj[0].vehicle_id:03d}"
            scenes_path = scenes_dir / f"{name}.jsonl"
            regions_path = regions_dir / f"{name}.json"
            ingest.write_scenes_jsonl(scenes, scenes_path)
            regions_path.write_text(
                json.dumps(ingest.region_labels_to_json(labels), sort_keys=True) + "\n",
                encoding="utf-8")
            index.append({"name": name, "scenes": str(scenes_path),
                          "regions": str(regions_path)})
            outputs.extend([scenes_path, regions_path])

    if not index:
        raise LanescopeError("no lane-change trajectories found in the tracks")
    index_path = cfg.out_dir / "sequences.json"
    index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    outputs.append(index_path)
    _write_manifest(cfg, "ingest", track_files, outputs)
    return outputs


def stage_fields(cfg: PipelineConfig) -> list[Path]:
    index = _sequence_index(cfg)
    fields_dir = cfg.out_dir / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    compute = field.as_gvf if cfg.skewed else field.gvf
    inputs, outputs = [], []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for entry in index:
            scenes_path = _require(Path(entry["scenes"]))
            scenes = ingest.read_scenes_jsonl(scenes_path, cfg.roi)
            tensors = list(pool.map(
                lambda scene: compute(scene, cfg.roi, cfg.field_params), scenes))
            out_path = fields_dir / f"{entry['name']}.jsonl"
            field.write_fields_jsonl(tensors, cfg.roi, out_path)
            inputs.append(scenes_path)
            outputs.append(out_path)
            if cfg.write_csv:
                csv_path = fields_dir / f"{entry['name']}.csv"
                field.write_fields_csv(tensors, cfg.roi, csv_path)
                outputs.append(csv_path)
    _write_manifest(cfg, "fields", inputs, outputs)
    return outputs


def _all_fields(cfg: PipelineConfig, index) -> list:
    tensors = []
    for entry in index:
        tensors.extend(field.read_fields_jsonl(_require(
            cfg.out_dir / "fields" / f"{entry['name']}.jsonl")))
    return tensors


def stage_train_codec(cfg: PipelineConfig) -> list[Path]:
    index = _sequence_index(cfg)
    tensors = _all_fields(cfg, index)
    codec_dir = cfg.out_dir / "codec"
    codec_dir.mkdir(parents=True, exist_ok=True)
    if cfg.encoder == "cae":
        model = codec.cae_init(cfg.seed)
        model, history = codec.cae_train(model, tensors, cfg.train)
        out = codec_dir / "cae.json"
        codec.save_checkpoint(model, out)
        (codec_dir / "train_history.json").write_text(
            json.dumps({"loss": history}, sort_keys=True) + "\n", encoding="utf-8")
        outputs = [out, codec_dir / "train_history.json"]
    else:
        proj = codec.linear_fallback_fit(tensors, k=codec.LATENT_DIM)
        out = codec_dir / "projection.json"
        codec.save_projection(proj, out)
        outputs = [out]
    inputs = [cfg.out_dir / "fields" / f"{e['name']}.jsonl" for e in index]
    _write_manifest(cfg, "train-codec", inputs, outputs)
    return outputs


def stage_encode(cfg: PipelineConfig) -> list[Path]:
    index = _sequence_index(cfg)
    features_dir = cfg.out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    if cfg.encoder == "cae":
        model = codec.load_checkpoint(_require(cfg.out_dir / "codec" / "cae.json"))
        encode_fn = lambda tensors: codec.encode(model, tensors)
    else:
        proj = codec.load_projection(_require(cfg.out_dir / "codec" / "projection.json"))
        encode_fn = lambda tensors: codec.linear_fallback_encode(proj, tensors)
    inputs, outputs = [], []
    for entry in index:
        scenes = ingest.read_scenes_jsonl(_require(Path(entry["scenes"])), cfg.roi)
        tensors = field.read_fields_jsonl(_require(
            cfg.out_dir / "fields" / f"{entry['name']}.jsonl"))
        latents = encode_fn(tensors)
        seq = codec.build_features([s.ego for s in scenes], latents)
        out_path = features_dir / f"{entry['name']}.csv"
        _write_features_csv(seq, out_path)
        inputs.append(cfg.out_dir / "fields" / f"{entry['name']}.jsonl")
        outputs.append(out_path)
    _write_manifest(cfg, "encode", inputs, outputs)
    return outputs


def _write_features_csv(seq, path) -> None:
    header = ["frame", "vx", "vy", "ax", "ay"] + [f"h{i}" for i in range(1, 9)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for frame, row in zip(seq.frames, seq.values):
            fh.write(",".join([str(int(frame))] + [repr(float(v)) for v in row]) + "\n")


def _read_features_csv(path):
    import csv as _csv

    from .core import FeatureSequence
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        next(reader)
        frames, rows = [], []
        for rec in reader:
            frames.append(int(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return FeatureSequence(values=np.asarray(rows), frames=np.asarray(frames))


def stage_segment(cfg: PipelineConfig) -> list[Path]:
    index = _sequence_index(cfg)
    seqs = [_read_features_csv(_require(cfg.out_dir / "features" / f"{e['name']}.csv"))
            for e in index]
    std_seqs, std = codec.standardize_many(seqs)
    summary, _, state = bnp.fit(std_seqs, cfg.hyper, iterations=cfg.bnp_iterations,
                                rng=cfg.rng("segment"))
    relabeled, mapping = analysis.relabel_by_frequency(state.labels_concat())

    labels_dir = cfg.out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    cursor = 0
    for entry, seq in zip(index, seqs):
        part = relabeled[cursor:cursor + len(seq)]
        cursor += len(seq)
        out_path = labels_dir / f"{entry['name']}.csv"
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            fh.write("frame,label\n")
            for frame, label in zip(seq.frames, part):
                fh.write(f"{int(frame)},{int(label)}\n")
        outputs.append(out_path)

    chain_path = cfg.out_dir / "segment" / "chain.json"
    chain_path.parent.mkdir(parents=True, exist_ok=True)
    summary["relabel_map"] = {str(k): int(v) for k, v in mapping.items()}
    summary["standardization"] = {"mean": std.mean.tolist(), "scale": std.scale.tolist()}
    chain_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    outputs.append(chain_path)
    inputs = [cfg.out_dir / "features" / f"{e['name']}.csv" for e in index]
    _write_manifest(cfg, "segment", inputs, outputs)
    return outputs


def _read_labels_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return rows[:, 0], rows[:, 1]


def stage_analyze(cfg: PipelineConfig) -> list[Path]:
    index = _sequence_index(cfg)
    out_dir = cfg.out_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs, outputs = [], []

    per_seq = []
    for entry in index:
        labels_path = _require(cfg.out_dir / "labels" / f"{entry['name']}.csv")
        _, labels = _read_labels_csv(labels_path)
        regions = ingest.region_labels_from_json(json.loads(
            _require(Path(entry["regions"])).read_text(encoding="utf-8")))
        scenes = ingest.read_scenes_jsonl(_require(Path(entry["scenes"])), cfg.roi)
        tensors = field.read_fields_jsonl(_require(
            cfg.out_dir / "fields" / f"{entry['name']}.jsonl"))
        per_seq.append((labels, regions, scenes, tensors))
        inputs.append(labels_path)

    all_labels = np.concatenate([labels for labels, _, _, _ in per_seq])
    pattern_set = tuple(int(p) for p in np.unique(all_labels))

    hist = analysis.occupancy_histogram(all_labels)
    occ_path = out_dir / "occupancy.json"
    analysis.write_json(analysis.occupancy_to_json(hist), occ_path)
    outputs.append(occ_path)

    all_fields = [t for _, _, _, tensors in per_seq for t in tensors]
    prototypes = analysis.prototype_fields(all_fields, all_labels)
    proto_path = out_dir / "prototypes.json"
    analysis.write_json(analysis.prototypes_to_json(prototypes, cfg.roi), proto_path)
    outputs.append(proto_path)

    matrices = []
    for region in cfg.regions:
        for include_self in (True, False):
            parts = [analysis.transition_counts(labels, regions, region, include_self,
                                                pattern_set=pattern_set)
                     for labels, regions, _, _ in per_seq]
            matrices.append(analysis.merge_transition_matrices(parts))
    trans_doc = {"matrices": [analysis.transition_matrix_to_json(m) for m in matrices]}
    trans_path = out_dir / "transitions.json"
    analysis.write_json(trans_doc, trans_path)
    trans_csv = out_dir / "transitions.csv"
    analysis.write_transition_csv(matrices, trans_csv)
    outputs.extend([trans_path, trans_csv])

    table: dict[int, list[tuple[float, float]]] = {}
    for labels, _, scenes, _ in per_seq:
        part = analysis.lateral_state_table(labels, [s.ego for s in scenes])
        for k, v in part.items():
            table.setdefault(k, []).extend(v)
    lateral_path = out_dir / "lateral_states.csv"
    analysis.write_lateral_csv(table, lateral_path)
    outputs.append(lateral_path)

    if cfg.fractions:
        feature_seqs = [_read_features_csv(_require(
            cfg.out_dir / "features" / f"{e['name']}.csv")) for e in index]
        std_seqs, _ = codec.standardize_many(feature_seqs)
        curve = analysis.pattern_count_curve(std_seqs, cfg.hyper, cfg.fractions,
                                             cfg.curve_seeds, cfg.curve_iterations)
        curve_path = out_dir / "pattern_curve.json"
        analysis.write_json({"fractions": [{"fraction": f, "median_patterns": m}
                                           for f, m in sorted(curve.items())]}, curve_path)
        outputs.append(curve_path)

    _write_manifest(cfg, "analyze", inputs, outputs)
    return outputs


_STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "fields": stage_fields,
    "train-codec": stage_train_codec,
    "encode": stage_encode,
    "segment": stage_segment,
    "analyze": stage_analyze,
}


def run(subcommand: str, config_path, overrides: list[str] = ()) -> int:
    """Run one stage (or the whole pipeline); returns the process exit code."""
    try:
        cfg = load_config(config_path, list(overrides))
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if subcommand == "pipeline":
            for name in ("synth", "ingest", "fields", "train-codec",
                         "encode", "segment", "analyze"):
                _STAGES[name](cfg)
        else:
            _STAGES[subcommand](cfg)
    except ConfigError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except LanescopeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lanescope",
        description="Learn multi-vehicle lane-change interaction patterns.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage"
                           if name != "pipeline" else "run every stage in order")
        p.add_argument("config", help="path to the JSON pipeline configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config entry (JSON value or bare string)")
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
