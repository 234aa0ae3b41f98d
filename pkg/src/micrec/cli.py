"""Command-line surface: prepare / train / eval / recommend / selftest.

Configuration comes from a flat `key = value` file plus CLI flags (flags
win).  Every run writes a manifest with the config hash, the seed, and
input digests so outputs can be reproduced bit-identically in 64-bit
mode.  Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence.

Only the standard library is imported at module level so that
MICREC_THREADS can cap BLAS threading before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration registry
# ---------------------------------------------------------------------------

def _fraction(v):
    return 0.0 <= v <= 1.0


# name -> (python type, default, validator or None)
CONFIG_SPEC = {
    "d": (int, 64, lambda v: v >= 1),
    "layers": (int, 3, lambda v: v >= 0),
    "k": (int, 3, lambda v: v >= 1),
    "w": (float, 0.9, lambda v: 0.0 < v < 1.0),
    "beta": (float, 0.01, lambda v: v >= 0.0),
    "gamma": (float, 1.0, lambda v: v >= 0.0),
    "tau": (float, None, lambda v: v > 0.0),
    "lam": (float, 1e-4, lambda v: v >= 0.0),
    "lr": (float, 1e-3, lambda v: v > 0.0),
    "dropout": (float, 0.2, lambda v: 0.0 <= v < 1.0),
    "alpha_start": (float, 0.5, lambda v: 0.0 <= v <= 1.0),
    "alpha_end": (float, 1.0, lambda v: 0.0 <= v <= 1.0),
    "epochs": (int, 1000, lambda v: v >= 1),
    "patience": (int, 50, lambda v: v >= 0),
    "batches": (int, 100, lambda v: v >= 1),
    "overlap_batch": (int, 64, lambda v: v >= 2),
    "eval_n": (int, 20, lambda v: v >= 1),
    "seed": (int, 0, None),
    "min_rating": (float, 4.0, None),
    "min_degree": (int, 10, lambda v: v >= 0),
    "unseen_frac": (float, 0.2, lambda v: 0.0 <= v < 1.0),
    "train_frac": (float, 0.7, _fraction),
    "val_frac": (float, 0.15, _fraction),
    "test_frac": (float, 0.15, _fraction),
    "new_frac": (float, 0.5, _fraction),
    "template_policy": (str, "all-seen", lambda v: v in ("all-seen", "top-degree")),
    "template_m": (int, None, lambda v: v >= 0),
    "preset": (str, "none", lambda v: v in ("none", "food_kitchen",
                                            "beauty_electronics", "toy_game")),
    "no_mm": (bool, False, None),
    "no_cd": (bool, False, None),
    "no_txt": (bool, False, None),
    "no_vis": (bool, False, None),
    "include_positive_in_denominator": (bool, False, None),
    "raw_a": (str, None, None),
    "raw_b": (str, None, None),
    "overlap": (str, None, None),
    "features_text_a": (str, None, None),
    "features_vis_a": (str, None, None),
    "features_text_b": (str, None, None),
    "features_vis_b": (str, None, None),
}

_TAU_PRESETS = {"food_kitchen": 0.2, "beauty_electronics": 0.1, "toy_game": 0.1}


def _parse_value(key: str, raw: str):
    typ = CONFIG_SPEC[key][0]
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SPEC:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit CLI flags, then validation."""
    cfg = {key: spec[1] for key, spec in CONFIG_SPEC.items()}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg.update(read_config_file(args.config))
    for key in CONFIG_SPEC:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            cfg[key] = flag
    if cfg["tau"] is None:
        cfg["tau"] = _TAU_PRESETS.get(cfg["preset"], 0.2)
    for key, (_typ, _default, check) in CONFIG_SPEC.items():
        val = cfg[key]
        if val is not None and check is not None and not check(val):
            raise ConfigError(f"config value out of range: {key} = {val!r}")
    fracs = cfg["train_frac"] + cfg["val_frac"] + cfg["test_frac"]
    if abs(fracs - 1.0) > 1e-9:
        raise ConfigError("train/val/test fractions must sum to 1")
    if cfg["alpha_start"] > cfg["alpha_end"]:
        raise ConfigError("alpha_start must not exceed alpha_end")
    if cfg["patience"] > cfg["epochs"]:
        raise ConfigError("patience must not exceed epochs")
    if cfg["no_txt"] and cfg["no_vis"]:
        raise ConfigError("--no-txt and --no-vis cannot be combined")
    if cfg["template_policy"] == "top-degree" and cfg["template_m"] is None:
        raise ConfigError("top-degree template policy needs template_m")
    return cfg


def require_paths(cfg: dict, keys, out_dir=None) -> None:
    for key in keys:
        path = cfg.get(key)
        if not path:
            raise ConfigError(f"missing required path option: {key}")
        if not os.path.exists(path):
            raise ConfigError(f"{key}: path does not exist: {path}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: dict, inputs) -> None:
    semantic = {k: v for k, v in sorted(cfg.items()) if v is not None}
    payload = {
        "command": command,
        "config": semantic,
        "config_hash": hashlib.sha256(
            json.dumps(semantic, sort_keys=True).encode()).hexdigest(),
        "seed": cfg.get("seed"),
        "inputs": {str(p): _sha256(p) for p in sorted(str(x) for x in inputs)},
    }
    path = Path(out_dir) / f"manifest-{command}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# command: prepare
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    require_paths(cfg, ["raw_a", "raw_b", "overlap"], out_dir=args.out)
    from .graph import (OverlapMap, ingest, make_inductive_split,
                        read_interaction_file, write_split_manifest)

    out = Path(args.out)
    stats_rows = []
    user_maps = {}
    fractions = (cfg["train_frac"], cfg["val_frac"], cfg["test_frac"])
    for tag, raw_key, seed_shift in (("A", "raw_a", 0), ("B", "raw_b", 1)):
        records = read_interaction_file(cfg[raw_key])
        graph, user_map, item_map = ingest(records, cfg["min_rating"],
                                           cfg["min_degree"], tag=tag)
        graph, bundle, user_perm, item_perm = make_inductive_split(
            graph, cfg["unseen_frac"], fractions, cfg["new_frac"],
            seed=cfg["seed"] + seed_shift)
        final_users = {key: int(user_perm[idx]) for key, idx in user_map.items()}
        final_items = {key: int(item_perm[idx]) for key, idx in item_map.items()}
        user_maps[tag] = final_users
        write_split_manifest(out / f"{tag}.split.tsv", graph, bundle, cfg["seed"])
        (out / f"{tag}.idmap.json").write_text(
            json.dumps({"users": final_users, "items": final_items},
                       sort_keys=True) + "\n", encoding="utf-8")
        stats_rows.append((tag, graph.n_users, graph.n_items, len(bundle.train),
                           len(bundle.new), len(bundle.val), len(bundle.test)))

    pairs = []
    seen_keys = set()
    with open(cfg["overlap"], encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            key_a, key_b = (parts[0], parts[0]) if len(parts) == 1 else parts[:2]
            if (key_a, key_b) in seen_keys:
                continue
            seen_keys.add((key_a, key_b))
            if key_a in user_maps["A"] and key_b in user_maps["B"]:
                pairs.append((user_maps["A"][key_a], user_maps["B"][key_b]))
    overlap = OverlapMap(pairs=tuple(sorted(pairs)))
    (out / "overlap.json").write_text(
        json.dumps([list(p) for p in overlap.pairs]) + "\n", encoding="utf-8")

    header = f"{'domain':>8} {'|U|':>7} {'|I|':>7} {'|E_tr|':>8} " \
             f"{'|E_new|':>8} {'|E_val|':>8} {'|E_test|':>9}"
    lines = [header] + [
        f"{tag:>8} {nu:>7} {ni:>7} {tr:>8} {nw:>8} {va:>8} {te:>9}"
        for tag, nu, ni, tr, nw, va, te in stats_rows]
    lines.append(f"overlapping users: {len(overlap.pairs)}")
    (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "stats.json").write_text(json.dumps({
        tag: {"users": nu, "items": ni, "train": tr, "new": nw,
              "val": va, "test": te}
        for tag, nu, ni, tr, nw, va, te in stats_rows} |
        {"overlap": len(overlap.pairs)}, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(args.out, "prepare", cfg,
                   [cfg["raw_a"], cfg["raw_b"], cfg["overlap"]])
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# shared loading for train / eval / recommend
# ---------------------------------------------------------------------------

def _load_prepared(prepared: str):
    from .graph import OverlapMap, read_split_manifest

    prepared = Path(prepared)
    for name in ("A.split.tsv", "B.split.tsv", "overlap.json"):
        if not (prepared / name).exists():
            raise ConfigError(f"prepared directory is missing {name}")
    graphs, bundles, idmaps = {}, {}, {}
    for tag in ("A", "B"):
        graphs[tag], bundles[tag], _seed = read_split_manifest(
            prepared / f"{tag}.split.tsv", tag=tag)
        idmaps[tag] = json.loads((prepared / f"{tag}.idmap.json").read_text())
    pairs = json.loads((prepared / "overlap.json").read_text())
    overlap = OverlapMap(pairs=tuple((int(a), int(b)) for a, b in pairs))
    return graphs, bundles, idmaps, overlap


def _load_domain_features(cfg: dict, tag: str, n_items: int):
    from .features import load_features

    text_key = f"features_text_{tag.lower()}"
    vis_key = f"features_vis_{tag.lower()}"
    require_paths(cfg, [text_key, vis_key])
    modality, text = load_features(cfg[text_key], n_items)
    if modality != "text":
        raise ConfigError(f"{cfg[text_key]}: expected a text feature file")
    modality, vis = load_features(cfg[vis_key], n_items)
    if modality != "visual":
        raise ConfigError(f"{cfg[vis_key]}: expected a visual feature file")
    return text, vis


def _modality_choice(cfg: dict) -> str:
    if cfg["no_vis"]:
        return "text"
    if cfg["no_txt"]:
        return "visual"
    return "fused"


def _build_domain(cfg: dict, tag: str, graph, bundle, templates=None):
    import numpy as np

    from .trainer import build_domain_data

    use_mm = not cfg["no_mm"]
    if use_mm:
        text, vis = _load_domain_features(cfg, tag, graph.n_items)
    else:
        text = np.zeros((graph.n_items, 1))
        vis = np.zeros((graph.n_items, 1))
    return build_domain_data(
        graph, bundle, text, vis, k=cfg["k"], w=cfg["w"],
        template_policy=cfg["template_policy"], template_m=cfg["template_m"],
        use_mm=use_mm, modality=_modality_choice(cfg), templates=templates)


def _checkpoint_header(cfg: dict, data_a, data_b, idmaps, result) -> dict:
    def keys_by_id(mapping):
        out = [None] * len(mapping)
        for key, idx in mapping.items():
            out[idx] = key
        return out

    domains = {}
    for tag, data in (("A", data_a), ("B", data_b)):
        g = data.graph
        domains[tag] = {
            "n_users": g.n_users, "n_seen_users": g.n_seen_users,
            "n_items": g.n_items, "n_seen_items": g.n_seen_items,
            "template_users": list(g.template_users),
            "template_items": list(g.template_items),
            "user_keys": keys_by_id(idmaps[tag]["users"]),
            "item_keys": keys_by_id(idmaps[tag]["items"]),
        }
    semantic = {k: v for k, v in sorted(cfg.items()) if v is not None}
    return {
        "config": semantic,
        "domains": domains,
        "best_alpha": result.best_alpha,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not Path(args.prepared).is_dir():
        raise ConfigError(f"prepared directory not found: {args.prepared}")
    require_paths(cfg, [], out_dir=args.out)
    from .encoder import EncoderConfig, named_tensors, save_checkpoint
    from .objective import LossWeights
    from .trainer import (TrainConfig, history_lines, save_train_state, train)

    graphs, bundles, idmaps, overlap = _load_prepared(args.prepared)
    data_a = _build_domain(cfg, "A", graphs["A"], bundles["A"])
    data_b = _build_domain(cfg, "B", graphs["B"], bundles["B"])

    enc = EncoderConfig(d=cfg["d"], alpha=cfg["alpha_start"], k=cfg["k"],
                        layers=cfg["layers"], dropout_p=cfg["dropout"])
    tc = TrainConfig(epochs_max=cfg["epochs"], patience=cfg["patience"],
                     batches_per_epoch=cfg["batches"],
                     overlap_batch=cfg["overlap_batch"], lr=cfg["lr"],
                     alpha_start=cfg["alpha_start"], alpha_end=cfg["alpha_end"],
                     seed=cfg["seed"], eval_n=cfg["eval_n"])
    weights = LossWeights(
        lam=cfg["lam"], beta=cfg["beta"],
        gamma=0.0 if cfg["no_cd"] else cfg["gamma"], tau=cfg["tau"],
        include_positive_in_denominator=cfg["include_positive_in_denominator"])

    result = train(data_a, data_b, overlap, enc, tc, weights)

    out = Path(args.out)
    header = _checkpoint_header(cfg, data_a, data_b, idmaps, result)
    save_checkpoint(out / "checkpoint.ckpt", header, named_tensors(result.params))
    save_train_state(out / "state.ckpt", result.state)
    (out / "history.txt").write_text(
        "\n".join(history_lines(result.history)) + "\n", encoding="utf-8")
    inputs = [args.prepared + f"/{t}.split.tsv" for t in "AB"]
    if not cfg["no_mm"]:
        inputs += [cfg["features_text_a"], cfg["features_vis_a"],
                   cfg["features_text_b"], cfg["features_vis_b"]]
    write_manifest(args.out, "train", cfg, inputs)
    print(f"best epoch {result.best_epoch} "
          f"mean val recall@{tc.eval_n} {result.best_metric:.4f} "
          f"(stopped after epoch {result.stopped_epoch})")
    return 0


# ---------------------------------------------------------------------------
# command: eval
# ---------------------------------------------------------------------------

def _load_model(args, cfg):
    from .encoder import CheckpointError, load_checkpoint, params_from_named

    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    header, tensors = load_checkpoint(args.checkpoint)
    params = params_from_named(tensors, two_domains=True)
    graphs, bundles, idmaps, overlap = _load_prepared(args.prepared)
    for tag in ("A", "B"):
        want = header["domains"][tag]
        g = graphs[tag]
        if (want["n_users"], want["n_items"]) != (g.n_users, g.n_items) or \
           (want["n_seen_users"], want["n_seen_items"]) != (g.n_seen_users,
                                                            g.n_seen_items):
            raise CheckpointError(
                f"checkpoint/population mismatch for domain {tag}: "
                f"checkpoint has {want['n_users']}x{want['n_items']}, "
                f"split has {g.n_users}x{g.n_items}")
    return header, params, graphs, bundles, idmaps, overlap


def _restore_domain(cfg_ckpt: dict, header: dict, tag: str, graph, bundle):
    from .graph import with_templates

    dom = header["domains"][tag]
    graph = with_templates(graph, dom["template_users"], dom["template_items"])
    return _build_domain(cfg_ckpt, tag, graph, bundle)


def parse_n_list(spec: str) -> list[int]:
    """Comma-separated values plus `a..b[:step]` ranges, e.g. `5..100:5`."""
    out = []
    for token in spec.split(","):
        token = token.strip()
        if ".." in token:
            bounds, _, step = token.partition(":")
            lo, hi = bounds.split("..")
            out.extend(range(int(lo), int(hi) + 1, int(step) if step else 5))
        elif token:
            out.append(int(token))
    if not out or any(n < 1 for n in out):
        raise ConfigError(f"bad N list: {spec!r}")
    return sorted(set(out))


def parse_slices(spec: str):
    slices = []
    for token in spec.split(","):
        token = token.strip()
        if token == "all":
            slices.append(("all", None))
        elif token.startswith("low:"):
            q = float(token[4:])
            if not 0.0 < q <= 1.0:
                raise ConfigError(f"low-degree fraction out of range: {q}")
            slices.append((f"low:{q:g}", q))
        elif token:
            raise ConfigError(f"unknown slice {token!r}")
    return slices


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    require_paths(cfg, [], out_dir=args.out)
    from dataclasses import replace

    from .encoder import EncoderConfig
    from .evaluation import (EvalReport, evaluate, format_report,
                             low_degree_items, ranking_contexts, report_lines)
    from .trainer import infer_representations

    header, params, graphs, bundles, idmaps, _ = _load_model(args, cfg)
    ckpt_cfg = dict(header["config"])
    for key in ("no_mm", "no_txt", "no_vis"):
        ckpt_cfg.setdefault(key, False)
    cfg_merged = {**cfg, **{k: ckpt_cfg[k]
                            for k in ("d", "layers", "k", "w", "no_mm",
                                      "no_txt", "no_vis", "template_policy")
                            if k in ckpt_cfg}}
    n_list = parse_n_list(args.n_list)
    slice_specs = parse_slices(args.slices)

    rows = []
    for tag, dparams in (("A", params.a), ("B", params.b)):
        data = _restore_domain(cfg_merged, header, tag, graphs[tag], bundles[tag])
        enc = EncoderConfig(d=ckpt_cfg["d"], alpha=header["best_alpha"],
                            k=ckpt_cfg["k"], layers=ckpt_cfg["layers"],
                            dropout_p=0.0)
        r = infer_representations(data, dparams, enc)
        exclude, relevant = ranking_contexts(data.split, stage="test")
        slices = {}
        for name, q in slice_specs:
            slices[name] = None if q is None else low_degree_items(
                data.split.train, data.graph.n_items, q)
        report = evaluate(r, data.graph.n_users, data.graph.n_items, exclude,
                          relevant, n_list, domain=tag, slices=slices)
        rows.extend(report.rows)
    report = EvalReport(rows=tuple(rows))

    out = Path(args.out)
    (out / "report.txt").write_text(format_report(report) + "\n", encoding="utf-8")
    (out / "report.tsv").write_text("\n".join(report_lines(report)) + "\n",
                                    encoding="utf-8")
    write_manifest(args.out, "eval", cfg,
                   [args.checkpoint] + [f"{args.prepared}/{t}.split.tsv"
                                        for t in "AB"])
    print(format_report(report))
    return 0


# ---------------------------------------------------------------------------
# command: recommend
# ---------------------------------------------------------------------------

def _nearest_keys(key: str, known, limit: int = 5) -> list[str]:
    def shared_prefix(a, b):
        n = 0
        for x, y in zip(a, b):
            if x != y:
                break
            n += 1
        return n

    ranked = sorted(known, key=lambda k: (-shared_prefix(key, k), k))
    return ranked[:limit]


def cmd_recommend(args) -> int:
    cfg = resolve_config(args)
    from .encoder import EncoderConfig
    from .evaluation import rank_items
    from .graph import DataFormatError
    from .trainer import infer_representations

    header, params, graphs, bundles, idmaps, _ = _load_model(args, cfg)
    tag = args.domain
    if tag not in ("A", "B"):
        raise ConfigError("--domain must be A or B")
    users = idmaps[tag]["users"]
    if args.user not in users:
        near = ", ".join(_nearest_keys(args.user, users))
        raise DataFormatError(
            f"unknown user key {args.user!r} in domain {tag}; nearest known "
            f"keys: {near}")
    user = users[args.user]

    ckpt_cfg = dict(header["config"])
    cfg_merged = {**cfg, **{k: ckpt_cfg[k]
                            for k in ("d", "layers", "k", "w", "no_mm",
                                      "no_txt", "no_vis", "template_policy")
                            if k in ckpt_cfg}}
    data = _restore_domain(cfg_merged, header, tag, graphs[tag], bundles[tag])
    dparams = params.a if tag == "A" else params.b
    enc = EncoderConfig(d=ckpt_cfg["d"], alpha=header["best_alpha"],
                        k=ckpt_cfg["k"], layers=ckpt_cfg["layers"], dropout_p=0.0)
    r = infer_representations(data, dparams, enc)

    import numpy as np
    known = {i for u, i in list(data.split.train) + list(data.split.new)
             if u == user}
    candidates = np.array([i for i in range(data.graph.n_items)
                           if i not in known], dtype=np.int64)
    ranked = rank_items(r, data.graph.n_users, user, candidates)[:args.top_n]
    item_keys = header["domains"][tag]["item_keys"]
    scores = r[data.graph.n_users + ranked] @ r[user]
    lines = [f"{item_keys[i]}\t{s:.6f}" for i, s in zip(ranked, scores)]
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "recommendations.tsv").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")
        write_manifest(args.out, "recommend", cfg, [args.checkpoint])
    return 0


# ---------------------------------------------------------------------------
# command: selftest
# ---------------------------------------------------------------------------

def cmd_selftest(args) -> int:
    import numpy as np

    from . import numeric
    from .encoder import init_domain_params, propagate, template_encode
    from .features import UserFeatures, build_neighbor_index
    from .graph import graph_from_edges, make_inductive_split, validate_split, with_templates
    from .evaluation import metrics_at

    rng = np.random.default_rng(0)
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    ok = True
    for _ in range(20):
        n_u, n_i = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        edges = sorted({(int(rng.integers(n_u)), int(rng.integers(n_i)))
                        for _ in range(rng.integers(1, 12))})
        graph = with_templates(graph_from_edges("A", n_u, n_i, edges),
                               range(n_u), range(n_i))
        params = init_domain_params(rng, n_u, n_i, 4)
        alpha = float(rng.uniform(0.0, 1.2))
        x = template_encode(graph, params, alpha)
        want = np.zeros_like(x)
        for u in range(n_u):
            hits = graph.user_items[u]
            coef = (len(hits) + 1.0) ** (-alpha)
            for i in hits:
                want[u] += coef * (params.e_item[i] + params.b_user)
        ok &= bool(np.max(np.abs(x[:n_u] - want[:n_u])) <= 1e-12)
    check("template encoding matches direct formula", ok)

    ok = True
    for _ in range(10):
        n_u, n_i = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        edges = sorted({(int(rng.integers(n_u)), int(rng.integers(n_i)))
                        for _ in range(rng.integers(0, 20))})
        adj = numeric.normalized_adjacency(n_u, n_i, edges)
        xs = rng.normal(size=(n_u + n_i, 3))
        layers = int(rng.integers(0, 4))
        dense = adj.toarray()
        want, h = xs.copy(), xs.copy()
        for _l in range(layers):
            h = dense @ h
            want += h
        want /= layers + 1
        ok &= bool(np.max(np.abs(propagate(xs, adj, layers) - want)) <= 1e-10)
    check("propagation matches dense layer-sum oracle", ok)

    ok = True
    for _ in range(10):
        n = int(rng.integers(3, 20))
        text, vis = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        idx = build_neighbor_index(UserFeatures(text, vis), text, vis, 0.7, 3)
        unit_t = text / np.linalg.norm(text, axis=1, keepdims=True)
        unit_v = vis / np.linalg.norm(vis, axis=1, keepdims=True)
        sims = 0.7 * unit_t @ unit_t.T + 0.3 * unit_v @ unit_v.T
        for row in range(n):
            order = sorted((j for j in range(n) if j != row),
                           key=lambda j: (-sims[row, j], j))[:min(3, n - 1)]
            ok &= list(idx.user_neighbors[row]) == order
    check("neighbor index matches brute-force top-K", ok)

    ok = True
    for _ in range(50):
        n_items = int(rng.integers(3, 30))
        ranked = rng.permutation(n_items)
        rel = set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)),
                             replace=False).tolist())
        n = int(rng.integers(1, n_items + 3))
        p, r, nd = metrics_at(ranked, rel, n)
        top = [int(x) for x in ranked[:n]]
        hits = sum(1 for x in top if x in rel)
        ok &= abs(p - hits / n) < 1e-15 and abs(r - hits / len(rel)) < 1e-15
        ok &= 0.0 <= nd <= 1.0
    check("ranking metrics match independent evaluation", ok)

    ok = True
    for seed in range(5):
        g_rng = np.random.default_rng(seed)
        edges = sorted({(int(g_rng.integers(8)), int(g_rng.integers(8)))
                        for _ in range(24)})
        graph = graph_from_edges("A", 8, 8, edges)
        relabeled, bundle, _, _ = make_inductive_split(graph, 0.25, seed=seed)
        try:
            validate_split(relabeled, bundle)
        except ValueError:
            ok = False
    check("inductive split invariants hold", ok)

    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for key in keys:
        typ, _default, _check = CONFIG_SPEC[key]
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, dest=key, action="store_true",
                                default=None)
        else:
            parser.add_argument(flag, dest=key, type=typ, default=None)


_HYPER_KEYS = [k for k in CONFIG_SPEC
               if k not in ("raw_a", "raw_b", "overlap")]
_PATH_KEYS = ["raw_a", "raw_b", "overlap"]
_FEATURE_KEYS = ["features_text_a", "features_vis_a",
                 "features_text_b", "features_vis_b"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="micrec",
        description="inductive multimodal cross-domain recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter raw data and write the split")
    p.add_argument("--out", required=True)
    _add_config_flags(p, list(CONFIG_SPEC))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on prepared artifacts")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, _HYPER_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-list", default="20")
    p.add_argument("--slices", default="all")
    _add_config_flags(p, _FEATURE_KEYS + ["seed", "preset"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="rank items for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--out")
    _add_config_flags(p, _FEATURE_KEYS + ["seed"])
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("MICREC_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    from .encoder import CheckpointError
    from .features import FeatureError, IncompleteFeaturesError
    from .graph import DataFormatError, EmptyDomainError
    from .evaluation import NoEvaluableUsersError
    from .trainer import DivergenceError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncompleteFeaturesError as exc:
        print(f"data error: {exc}\nhint: run the feature extractor to "
              f"regenerate the feature files", file=sys.stderr)
        return 3
    except (DataFormatError, EmptyDomainError, FeatureError, CheckpointError,
            NoEvaluableUsersError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
