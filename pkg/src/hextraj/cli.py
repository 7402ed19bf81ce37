"""Command-line interface: ingest, train, predict, evaluate, hiermap, attention.

Every option mirrors a :class:`RunConfig` key (``--beam_width 3``); a
``key=value`` file passed with ``--config`` supplies values first and
explicit flags override it.  Exit codes: 0 ok, 1 usage, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import corpus, evaluation, geo, hiermap
from . import model as mdl
from .config import DATA_KEYS, MAP_KEYS, MODEL_KEYS, ConfigError, RunConfig, file_digest
from .corpus import DataError, Vocabulary
from .decode import BeamConfig, SearchError, SuccessorTable, beam_search
from .hexgrid import GridError, GridSpec, HexCell

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

COMMANDS = ("ingest", "train", "predict", "evaluate", "hiermap", "attention")


class UsageError(Exception):
    pass


class ArtifactMismatchError(DataError):
    """An artifact was produced under a different configuration or dataset."""


# -- helpers ------------------------------------------------------------------

def _path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if not getattr(cfg, k):
            raise UsageError(f"--{k} is required")


def _grid_spec(cfg: RunConfig, raws) -> GridSpec:
    """Projection anchored at the configured point, or at the data mean (4 decimals)."""
    pts = [(lat, lon) for t in raws for _, lat, lon in t.points]
    auto = np.round(np.mean(pts, axis=0), 4) if pts else (0.0, 0.0)
    lat = float(auto[0]) if cfg.anchor_lat == "auto" else float(cfg.anchor_lat)
    lon = float(auto[1]) if cfg.anchor_lon == "auto" else float(cfg.anchor_lon)
    return GridSpec(anchor_lat=lat, anchor_lon=lon)


def data_hash(cfg: RunConfig) -> str:
    extra = [file_digest(cfg.raw)]
    if cfg.map_path:
        extra.append(file_digest(cfg.map_path))
    return cfg.digest(DATA_KEYS, *extra)


def model_hash(cfg: RunConfig, dhash: str) -> str:
    return cfg.digest(MODEL_KEYS, dhash)


def _manifest(path: str, entries: dict, files=()):
    lines = [f"{k}={v}" for k, v in entries.items()]
    lines += [f"sha256:{os.path.basename(f)}={file_digest(f)}" for f in files]
    _write(path, "\n".join(lines) + "\n")


def _load_split(cfg: RunConfig):
    """Datasets and vocabulary written by ingest, checked for a common data hash."""
    out = {}
    hashes = set()
    for name in ("train", "val", "test"):
        seqs, spec, fields = corpus.read_dataset(_path(cfg, f"{name}.txt"))
        out[name] = seqs
        hashes.add(fields.get("data_hash"))
    if len(hashes) != 1:
        raise ArtifactMismatchError("dataset files come from different ingest runs")
    vocab = Vocabulary.load(_path(cfg, "vocab.txt"), strict=cfg.strict_vocab)
    return out, vocab, spec, fields, hashes.pop()


def _neighbor_fn(cfg: RunConfig, fields: dict):
    if fields.get("res") == "mixed":
        if not cfg.map_path:
            raise UsageError("dataset was built on a mixed map; pass --map_path")
        return hiermap.MixedResolutionMap.load(cfg.map_path).mixed_neighbors
    return None


def _load_trained(cfg: RunConfig):
    split, vocab, spec, fields, dhash = _load_split(cfg)
    try:
        model, meta = mdl.load_checkpoint(_path(cfg, "model.ckpt"))
    except FileNotFoundError:
        raise DataError(f"no checkpoint in {cfg.out_dir}; run train first") from None
    if meta.get("data_hash") != dhash:
        raise ArtifactMismatchError("checkpoint was trained on a different dataset")
    if meta.get("config_hash") != model_hash(cfg, dhash):
        raise ArtifactMismatchError("checkpoint was trained under a different configuration")
    if model.vocab_size != len(vocab):
        raise ArtifactMismatchError("checkpoint vocabulary size does not match vocab.txt")
    table = SuccessorTable(vocab, _neighbor_fn(cfg, fields), constrained=cfg.constrained)
    return model, vocab, spec, table, split, meta


def _encode_all(vocab: Vocabulary, seqs):
    return [vocab.encode(s) for s in seqs]


def _prefix_ids(cfg: RunConfig, vocab: Vocabulary, split) -> list[int]:
    if cfg.prefix.strip():
        tokens = cfg.prefix.replace(",", " ").split()
        try:
            cells = [HexCell.parse(t) for t in tokens]
        except GridError as exc:
            raise DataError(str(exc)) from None
        return [vocab.id_of(c) for c in cells]
    cases = evaluation.build_cases(_encode_all(vocab, split["test"]), cfg.l, cfg.k)
    if not cases:
        raise DataError("no --prefix given and the test split has no usable window")
    return list(cases[0].prefix)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a list of integers, got {text!r}") from None


# -- commands -----------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> int:
    _require(cfg, "raw")
    raws = corpus.load_raw(cfg.raw)
    if not raws:
        raise DataError(f"{cfg.raw}: no trajectories")
    if cfg.map_path:
        hmap = hiermap.MixedResolutionMap.load(cfg.map_path)
        spec, res_label = hmap.spec, "mixed"
        seqs = hiermap.retokenize(raws, hmap)
    else:
        spec, res_label = _grid_spec(cfg, raws), str(cfg.res)
        seqs = [corpus.to_hex_sequence(t, cfg.res, spec) for t in raws]
    seqs = corpus.filter_min_length(seqs, cfg.min_traj_len)
    split = corpus.split_by_start_time(seqs)
    vocab = corpus.build_vocab(split, strict=cfg.strict_vocab)
    dhash = data_hash(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    files = []
    for name in ("train", "val", "test"):
        path = _path(cfg, f"{name}.txt")
        corpus.write_dataset(path, getattr(split, name), spec, res_label, dhash)
        files.append(path)
    vocab.save(_path(cfg, "vocab.txt"))
    files.append(_path(cfg, "vocab.txt"))
    n_blocks = len(vocab) - 2
    avg_len = float(np.mean([len(s.cells) for s in seqs]))
    stats = {
        "data_hash": dhash,
        "blocks": n_blocks,
        "trajectories": len(seqs),
        "avg_length": f"{avg_len:.4f}",
        "train": len(split.train),
        "val": len(split.val),
        "test": len(split.test),
        "raw_trajectories": len(raws),
    }
    _manifest(_path(cfg, "manifest_ingest.txt"), stats, files)
    print(f"#Block {n_blocks}  #Trajectory {len(seqs)}  Avg. Length {avg_len:.2f}")
    print(f"split train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "raw")
    split, vocab, spec, fields, dhash = _load_split(cfg)
    if dhash != data_hash(cfg):
        raise ArtifactMismatchError("dataset does not match the current data configuration; rerun ingest")
    train_ids = _encode_all(vocab, split["train"])
    windows = [w for s in train_ids for w in corpus.make_windows(s, cfg.l, cfg.k)]
    if not windows:
        raise DataError(f"no training window: trajectories shorter than l + 1 = {cfg.l + 1} tokens")
    model = mdl.TransformerModel(mdl.ModelConfig(
        vocab_size=len(vocab), context_len=cfg.l + cfg.k, embed_dim=cfg.embed_dim, layers=cfg.layers,
        heads=cfg.heads, dropout=cfg.dropout, seed=cfg.seed))
    table = SuccessorTable(vocab, _neighbor_fn(cfg, fields), constrained=cfg.constrained)
    val_cases = evaluation.build_cases(_encode_all(vocab, split["val"]), cfg.l, cfg.k)

    def validate(m):
        if not val_cases:
            return float("nan")
        done = evaluation.predict_cases(m, val_cases, table, cfg.k, cfg.beam_width, cfg.renormalize)
        return evaluation.accuracy_at_n(done, 1)

    def progress(epoch, rep):
        print(f"epoch {epoch + 1}/{cfg.epochs} loss {rep.epoch_loss[-1]:.4f} val_acc@1 {rep.val_acc1[-1]:.4f}")

    tcfg = mdl.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr_start=cfg.lr_start,
                           lr_end=cfg.lr_end, weight_decay=cfg.weight_decay, seed=cfg.seed)
    report = mdl.train(model, windows, tcfg, validate=validate, on_epoch=progress)
    chash = model_hash(cfg, dhash)
    ckpt = _path(cfg, "model.ckpt")
    mdl.save_checkpoint(model, ckpt, meta={"data_hash": dhash, "config_hash": chash, "l": cfg.l, "k": cfg.k})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_acc1", "config_hash", "seed"])
    for i, (loss, acc) in enumerate(zip(report.epoch_loss, report.val_acc1), start=1):
        w.writerow([i, f"{loss:.8f}", f"{acc:.6f}", chash, cfg.seed])
    _write(_path(cfg, "loss.csv"), buf.getvalue())
    _manifest(_path(cfg, "manifest_train.txt"), {
        "config_hash": chash, "data_hash": dhash, "seed": cfg.seed, "parameters": model.num_parameters(),
        "windows": len(windows), "steps": report.steps,
    }, [ckpt, _path(cfg, "loss.csv")])
    print(f"saved {ckpt} ({model.num_parameters()} parameters, config {chash})")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    model, vocab, spec, table, split, meta = _load_trained(cfg)
    prefix = _prefix_ids(cfg, vocab, split)
    hyps = beam_search(model, prefix, BeamConfig(cfg.beam_width, cfg.k, cfg.renormalize), table)
    chash = meta["config_hash"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "score", "finished", "tokens", "config_hash"])
    features = []
    for rank, h in enumerate(hyps, start=1):
        w.writerow([rank, f"{h.score:.6f}", int(h.finished), " ".join(vocab.decode(h.generated)), chash])
        cells = [vocab.cells[t] for t in h.path]
        features += [geo.cell_feature(c, spec, rank=rank, step=i + 1) for i, c in enumerate(cells)]
        features.append(geo.centroid_path_feature(cells, spec, rank=rank, score=round(h.score, 6)))
    _write(_path(cfg, "predictions.csv"), buf.getvalue())
    collection = geo.feature_collection(features)
    collection["properties"] = {"config_hash": chash, "prefix": " ".join(vocab.decode(prefix))}
    _write(_path(cfg, "predictions.geojson"), geo.dumps(collection))
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    model, vocab, spec, table, split, meta = _load_trained(cfg)
    test_ids = _encode_all(vocab, split["test"])
    report = evaluation.evaluate(model, test_ids, table, cfg.l, cfg.k, cfg.beam_width, spec=spec,
                                 distance_bin_m=cfg.distance_bin_m, renormalize=cfg.renormalize)
    acc = report.accuracy
    if not acc[1] <= acc[3] <= acc[5]:
        raise SearchError(f"Acc@N not monotone in N: {acc}")
    chash = meta["config_hash"]
    _write(_path(cfg, "metrics.txt"), report.to_text())
    _write(_path(cfg, "metrics.csv"), report.to_csv(chash, cfg.seed))
    if cfg.sweep_l or cfg.sweep_k:
        ls = _int_list(cfg.sweep_l) or [cfg.l]
        ks = _int_list(cfg.sweep_k) or [cfg.k]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["l", "k", "cases", "acc1", "acc3", "acc5", "bleu", "config_hash", "seed"])
        for l in ls:
            for k in ks:
                if l < 1 or k < 1 or l + k > model.context_len:
                    continue
                cases = evaluation.build_cases(test_ids, l, k)
                if not cases:
                    continue
                done = evaluation.predict_cases(model, cases, table, k, cfg.beam_width, cfg.renormalize)
                row = [evaluation.accuracy_at_n(done, n) for n in (1, 3, 5)] + [evaluation.bleu(done)]
                w.writerow([l, k, len(done)] + [f"{v:.6f}" for v in row] + [chash, cfg.seed])
        _write(_path(cfg, "sweep.csv"), buf.getvalue())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_hiermap(cfg: RunConfig) -> int:
    _require(cfg, "raw")
    raws = corpus.load_raw(cfg.raw)
    spec = _grid_spec(cfg, raws)
    base_params = hiermap.SplitParams(0.0, 0.0, cfg.theta, cfg.r_min, cfg.r_max, cfg.max_iter,
                                      cfg.distinct_trajectories)
    base = hiermap.base_region(raws, spec, base_params)
    delta, phi = cfg.delta, cfg.phi
    if "auto" in (delta, phi):
        fm = hiermap.build_frequency(raws, hiermap.MixedResolutionMap(spec, base_params, base))
        cells = sorted(base)
        if delta == "auto":
            delta = float(np.median(fm.values(cells))) if cells else 0.0
        if phi == "auto":
            phi = float(np.median([fm.variability[c] for c in cells])) if cells else 0.0
    try:
        params = hiermap.SplitParams(float(delta), float(phi), cfg.theta, cfg.r_min, cfg.r_max, cfg.max_iter,
                                     cfg.distinct_trajectories)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    hmap = hiermap.generate(raws, spec, params, base=base)
    hmap.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    hmap.save(_path(cfg, "map.txt"))
    features = [geo.cell_feature(c, spec) for c in hmap.cells()]
    collection = geo.feature_collection(features)
    collection["properties"] = {"config_hash": cfg.digest(MAP_KEYS, file_digest(cfg.raw))}
    _write(_path(cfg, "map.geojson"), geo.dumps(collection))
    by_res = {}
    for c in hmap.active:
        by_res[c.res] = by_res.get(c.res, 0) + 1
    print(f"active cells {len(hmap)} by resolution {dict(sorted(by_res.items()))}")
    print(f"iterations {hmap.iterations} splits {len(hmap.lineage)} delta {params.delta:g} phi {params.phi:g}")
    return EXIT_OK


def cmd_attention(cfg: RunConfig) -> int:
    model, vocab, spec, table, split, meta = _load_trained(cfg)
    prefix = _prefix_ids(cfg, vocab, split)[-model.context_len:]
    layers = model.config.layers
    layer = cfg.attention_layer
    if not -layers <= layer < layers:
        raise ConfigError(f"attention_layer must be in [{-layers}, {layers})")
    _, _, heads, agg = model.forward_with_attention(np.array([prefix]), layer=layer)
    tokens = vocab.decode(prefix)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "query_pos", "key_pos", "query_token", "key_token", "weight"])
    mats = [(str(a), heads[0, a]) for a in range(heads.shape[1])] + [("max", agg[0])]
    for name, mat in mats:
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                w.writerow([layer % layers, name, i, j, tokens[i], tokens[j], f"{mat[i, j]:.8f}"])
    _write(_path(cfg, "attention.csv"), buf.getvalue())
    print(f"wrote {_path(cfg, 'attention.csv')} ({heads.shape[1]} heads + max, {len(prefix)} x {len(prefix)})")
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "hiermap": cmd_hiermap,
    "attention": cmd_attention,
}


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hextraj", description="Next-hexagon trajectory prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="key=value configuration file")
        for key in RunConfig.field_types():
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def parse_config(args) -> RunConfig:
    pairs = RunConfig.read_file(args.config) if args.config else {}
    base = RunConfig.from_pairs(pairs)
    flags = {k: v for k, v in vars(args).items() if k in RunConfig.field_types() and v is not None}
    return RunConfig.from_pairs(flags, base)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args)
        return HANDLERS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (hiermap.PartitionError, SearchError, mdl.TrainingDivergedError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, GridError, hiermap.MapError, mdl.ModelError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
