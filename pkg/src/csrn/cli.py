"""Command-line entry point for the whole pipeline.

One subcommand per stage so expensive artifacts (factorizations, frozen
candidate sets, checkpoints) are cached on disk and experiments are
resumable.  Every option can also come from a key=value config file; explicit
flags win over the file, the file wins over defaults.  `--dump-config` prints
the effective configuration and exits.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import coread, corpus, embeddings, evalbench, model, numerics, synthgen, training


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


class Command:
    def __init__(self, name: str, help_text: str, runner):
        self.name = name
        self.help = help_text
        self.runner = runner
        self.opts: list[tuple[str, type, object, str]] = []

    def add(self, name: str, typ, default, help_text: str = ""):
        self.opts.append((name, typ, default, help_text))
        return self

    def register(self, subparsers):
        p = subparsers.add_parser(self.name, help=self.help)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--dump-config", action="store_true",
                       help="print the effective configuration and exit")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded, fixed-order execution")
        for name, typ, default, help_text in self.opts:
            flag = "--" + name.replace("_", "-")
            t = _parse_bool if typ is bool else typ
            p.add_argument(flag, type=t, default=None,
                           help=f"{help_text} (default: {default})")
        p.set_defaults(_command=self)

    def resolve(self, args) -> dict:
        cfg = {name: default for name, _, default, _ in self.opts}
        types = {name: typ for name, typ, _, _ in self.opts}
        if args.config:
            try:
                with open(args.config, "r", encoding="utf-8") as f:
                    for lineno, line in enumerate(f, start=1):
                        line = line.strip()
                        if not line or line.startswith("#"):
                            continue
                        if "=" not in line:
                            raise ConfigError(f"{args.config}:{lineno}: expected key=value")
                        key, value = line.split("=", 1)
                        key = key.strip()
                        if key not in cfg:
                            raise ConfigError(f"{args.config}:{lineno}: unknown key {key!r}")
                        t = types[key]
                        cfg[key] = _parse_bool(value.strip()) if t is bool else t(value.strip())
            except OSError as e:
                raise ConfigError(f"cannot read config file: {e}") from None
        for name in cfg:
            v = getattr(args, name)
            if v is not None:
                cfg[name] = v
        return cfg


def config_hash(cfg: dict) -> int:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return int(hashlib.sha256(text.encode()).hexdigest()[:16], 16)


def dump_config(cfg: dict) -> None:
    for k in sorted(cfg):
        print(f"{k}={cfg[k]}")


def _meta(cfg: dict, seed_key: str = "seed") -> str:
    return f"seed={cfg.get(seed_key, 0)} config_hash={config_hash(cfg):016x}"


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------

def _load_stream(cfg):
    if not cfg["events"]:
        raise ConfigError("--events is required")
    return corpus.ingest(cfg["events"])


def _splits(stream, cfg):
    sc = corpus.SplitConfig(cfg["history_end"], cfg["train_end"],
                            cfg["valid_end"], cfg["test_end"])
    return corpus.split(stream, sc)


def _load_embeddings(cfg, stream, history):
    if cfg.get("embeddings"):
        return embeddings.load_embeddings(cfg["embeddings"], stream.item_index)
    return embeddings.fallback_embeddings(history, cfg["emb_dim"], cfg["emb_seed"])


def _split_opts(cmd: Command) -> Command:
    cmd.add("events", str, "", "preprocessed event-log file")
    cmd.add("history_end", int, 0, "end of the history window (exclusive)")
    cmd.add("train_end", int, 0, "end of the train window")
    cmd.add("valid_end", int, 0, "end of the validation window")
    cmd.add("test_end", int, 0, "end of the test window")
    return cmd


def _emb_opts(cmd: Command) -> Command:
    cmd.add("embeddings", str, "", "embedding file; empty = SVD fallback from history")
    cmd.add("emb_dim", int, 64, "fallback embedding size")
    cmd.add("emb_seed", int, 11, "fallback embedding seed")
    return cmd


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------

def run_synth(cfg, out):
    sc = synthgen.SynthConfig(
        users=cfg["users"], items=cfg["items"], clusters=cfg["clusters"],
        categories=cfg["categories"], events_per_user=cfg["events_per_user"],
        burst_rate=cfg["burst_rate"], burst_mult=cfg["burst_mult"],
        burst_decay=cfg["burst_decay"], concentration=cfg["concentration"],
        horizon=cfg["horizon"], seed=cfg["seed"])
    stream, labels = synthgen.generate(sc)
    corpus.write_events(stream, os.path.join(out, "events.tsv"), header=_meta(cfg))
    synthgen.write_labels(labels, os.path.join(out, "labels.csv"), header=_meta(cfg))
    print(f"wrote {len(stream)} events for {stream.n_users} users, "
          f"{stream.n_items} items -> {out}/events.tsv")
    return 0


def run_ingest(cfg, out):
    if not cfg["input"]:
        raise ConfigError("--input is required")
    stream = corpus.ingest(cfg["input"], cfg["min_dwell"], cfg["top_k_users"])
    corpus.write_events(stream, os.path.join(out, "events.tsv"), header=_meta(cfg))
    print(f"kept {len(stream)} events, {stream.n_users} users, {stream.n_items} items")
    return 0


def run_build_net(cfg, out):
    stream = _load_stream(cfg)
    history = corpus.window(stream, 0, cfg["history_end"])
    net = coread.build_network(history, T=cfg["rank"], N=cfg["neighbors"],
                               use_tfidf=cfg["use_tfidf"], seed=cfg["seed"],
                               selection=cfg["selection"])
    coread.save_network(net, os.path.join(out, "network.bin"), config_hash(cfg))
    print(f"network: {net.n_users} users, rank {net.rank}, "
          f"{net.neighbors.shape[1]} neighbors each, "
          f"{int(net.anchor.sum())} popularity-anchored")
    return 0


def run_analyze_net(cfg, out):
    net = coread.load_network(cfg["net"])
    stream = _load_stream(cfg)
    train = corpus.window(stream, cfg["history_end"], cfg["train_end"])
    meta = _meta(cfg)

    stats = coread.degree_stats(net)
    with open(os.path.join(out, "degree.csv"), "w") as f:
        f.write(f"# {meta}\n# nodes_with_outdegree={stats.n_positive} "
                f"max_outdegree={stats.max_degree}\ndegree,count\n")
        for d, c in zip(stats.degrees, stats.counts):
            f.write(f"{d},{c}\n")

    fractions = coread.reachability_within(net, cfg["max_steps"])
    with open(os.path.join(out, "reachability.csv"), "w") as f:
        f.write(f"# {meta}\n# denominator: ordered pairs "
                "(source with out-degree>0, any other node)\nsteps,fraction\n")
        for s, frac in enumerate(fractions, start=1):
            f.write(f"{s},{float(frac)!r}\n")

    prior = coread.prior_read_stats(net, train)
    shares = prior.shares()
    with open(os.path.join(out, "prior_readers.csv"), "w") as f:
        f.write(f"# {meta}\n# share_ge1={prior.share_ge1!r} share_ge5={prior.share_ge5!r}\n"
                "prior_readers,share\n")
        for c, share in enumerate(shares):
            f.write(f"{c},{float(share)!r}\n")

    coread.export_adjacency(net, os.path.join(out, "adjacency.csv"), header=meta)
    print(f"analytics written to {out}/ (share_ge1={prior.share_ge1:.4f})")
    return 0


def run_freeze(cfg, out):
    stream = _load_stream(cfg)
    history, train, valid, test = _splits(stream, cfg)
    target = valid if cfg["which"] == "valid" else test
    pool_streams = [history, train, valid] if cfg["which"] == "valid" \
        else [history, train, valid, test]
    emb = _load_embeddings(cfg, stream, history) if (cfg["embeddings"] or cfg["use_fallback_coverage"]) else None
    cands = evalbench.freeze_candidates(
        target, pool_streams, window=cfg["window"], seed=cfg["seed"],
        covered=emb.covered if emb else None, max_clicks=cfg["max_clicks"],
        uniform=cfg["uniform"], n_negatives=cfg["n_negatives"])
    path = os.path.join(out, f"candidates_{cfg['which']}.csv")
    evalbench.save_candidates(cands, path, config_hash(cfg))
    print(f"froze {len(cands)} candidate sets -> {path}")
    return 0


def _loss_config(cfg) -> training.LossConfig:
    return training.LossConfig(
        kind=cfg["kind"], score_reg=cfg["score_reg"],
        n_negatives=cfg["n_negatives"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], decay_factor=cfg["decay_factor"],
        decay_interval=cfg["decay_interval"], clip_norm=cfg["clip_norm"],
        weight_decay=cfg["weight_decay"], dropout_input=cfg["dropout_input"],
        dropout_decoder=cfg["dropout_decoder"], epochs=cfg["epochs"],
        seed=cfg["seed"], seq_len=cfg["seq_len"],
        neg_pool_window=cfg["neg_pool_window"],
        uniform_negatives=cfg["uniform_negatives"],
        max_examples_per_epoch=cfg["max_examples_per_epoch"],
        max_eval_clicks=cfg["max_eval_clicks"],
        eval_negatives=cfg["eval_negatives"], patience=cfg["patience"],
        neighbor_off=cfg["neighbor_off"])


def run_train(cfg, out):
    stream = _load_stream(cfg)
    history, train, valid, test = _splits(stream, cfg)
    net = coread.load_network(cfg["net"])
    emb = _load_embeddings(cfg, stream, history)
    if not cfg["embeddings"]:
        embeddings.save_embeddings(emb, stream.item_ids,
                                   os.path.join(out, "embeddings.tsv"))
    loss_cfg = _loss_config(cfg)
    dims = model.ModelDims(d_v=emb.dim, d_h=cfg["hidden_size"],
                           d_e=3 * net.rank, d_c=cfg["head_dim"],
                           n_heads=cfg["heads"], seq_len=cfg["seq_len"])
    result = training.train(history, train, valid, net, emb, loss_cfg, dims=dims)
    h = config_hash(cfg)
    model.save_checkpoint(result.params, os.path.join(out, "checkpoint.bin"),
                          training.optimizer_extra_blocks(result.state), h)
    model.save_checkpoint(result.best_params,
                          os.path.join(out, "best_checkpoint.bin"), None, h)
    training.write_log(result.log, os.path.join(out, "train_log.csv"), _meta(cfg))
    print(f"best validation MRR {result.best_val_mrr:.4f} "
          f"({result.dropped_uncovered} uncovered positives dropped)")
    return 0


def run_evaluate(cfg, out):
    stream = _load_stream(cfg)
    history, train, valid, test = _splits(stream, cfg)
    cands = evalbench.load_candidates(cfg["candidates"])
    ctx = training.UserHistory([history, train, valid, test])
    name = cfg["model"]
    if name in ("csrn", "gru"):
        params, _ = model.load_checkpoint(cfg["checkpoint"])
        net = coread.load_network(cfg["net"])
        emb = _load_embeddings(cfg, stream, history)
        scorer = evalbench.ModelScorer(params, net, emb, ctx,
                                       neighbor_off=(name == "gru"))
    elif name == "pop":
        scorer = evalbench.PopScorer(train)
    elif name == "itemcf":
        emb = _load_embeddings(cfg, stream, history)
        scorer = evalbench.ItemCFScorer(emb, ctx, cfg["seq_len"], cfg["top_m"])
    elif name == "usercf":
        scorer = evalbench.UserCFScorer(history, ctx, cfg["top_m"])
    else:
        raise ConfigError(f"unknown model {name!r}")
    result, ranks = evalbench.evaluate(scorer, cands)
    evalbench.write_metrics(result, name, os.path.join(out, f"metrics_{name}.json"))
    evalbench.write_ranks(ranks, os.path.join(out, f"ranks_{name}.csv"), _meta(cfg))
    print(json.dumps({"model": name, "mrr": result["mrr"], "hr": result["hr"]},
                     sort_keys=True, default=str))
    return 0


def run_recommend(cfg, out):
    stream = _load_stream(cfg)
    history, train, valid, test = _splits(stream, cfg)
    params, _ = model.load_checkpoint(cfg["checkpoint"])
    net = coread.load_network(cfg["net"])
    emb = _load_embeddings(cfg, stream, history)
    ctx = training.UserHistory([history, train, valid, test])
    if cfg["user"] not in stream.user_index:
        raise corpus.EmptyCorpusError(f"unknown user id {cfg['user']!r}")
    u = stream.user_index[cfg["user"]]
    t = cfg["ts"]
    items = np.flatnonzero(emb.covered)
    items = items[~np.isin(items, ctx.interacted_before(u, t))]
    scores, _ = training.batch_scores([u], [t], items[None], params, net, emb, ctx)
    order = np.argsort(-scores[0])[:cfg["topk"]]
    for j, s in zip(items[order], scores[0][order]):
        print(f"{stream.item_ids[j]}\t{s:.6f}")
    return 0


def run_gradcheck(cfg, out):
    kinds = ("top1max", "bprmax", "xe") if cfg["loss"] == "all" else (cfg["loss"],)
    worst = 0.0
    for kind in kinds:
        errors = training.finite_difference_check(kind, step=cfg["step"])
        for name in sorted(errors):
            print(f"{kind}\t{name}\t{errors[name]:.3e}")
        kind_worst = max(errors.values())
        print(f"{kind}\tmax\t{kind_worst:.3e}")
        worst = max(worst, kind_worst)
    if worst > cfg["tolerance"]:
        print(f"FAIL: max relative error {worst:.3e} > {cfg['tolerance']}",
              file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# Command table
# ---------------------------------------------------------------------------

def _commands():
    synth = Command("synth", "generate a synthetic corpus", run_synth)
    for name, typ, default, help_text in [
            ("users", int, 2000, "number of users"),
            ("items", int, 1000, "number of items"),
            ("clusters", int, 4, "planted user clusters"),
            ("categories", int, 8, "item categories"),
            ("events_per_user", float, 100.0, "mean clicks per user"),
            ("burst_rate", float, 1.0, "fraction of items that burst once"),
            ("burst_mult", float, 200.0, "peak burst click multiplier"),
            ("burst_decay", float, 86400.0, "burst e-folding time, seconds"),
            ("concentration", float, 25.0, "own-category preference weight"),
            ("horizon", int, 30 * 86400, "corpus duration, seconds"),
            ("seed", int, 0, "generator seed")]:
        synth.add(name, typ, default, help_text)

    ingest = Command("ingest", "clean and index a raw click log", run_ingest)
    ingest.add("input", str, "", "raw event-log file")
    ingest.add("min_dwell", int, 5, "drop clicks shorter than this many seconds")
    ingest.add("top_k_users", int, 0, "keep only the most active users; 0 = all")

    build = Command("build-net", "factor history and pick neighbors", run_build_net)
    build.add("events", str, "", "preprocessed event-log file")
    build.add("history_end", int, 0, "end of the history window")
    build.add("rank", int, 32, "SVD rank T")
    build.add("neighbors", int, 20, "neighbors per user N")
    build.add("use_tfidf", bool, True, "idf-weight the history matrix")
    build.add("selection", str, "similarity", "neighbor selection: similarity|random")
    build.add("seed", int, 0, "factorization seed")

    analyze = Command("analyze-net", "network analytics CSVs", run_analyze_net)
    analyze.add("net", str, "", "network file")
    analyze.add("events", str, "", "preprocessed event-log file")
    analyze.add("history_end", int, 0, "end of the history window")
    analyze.add("train_end", int, 0, "end of the train window")
    analyze.add("max_steps", int, 10, "BFS horizon for reachability")
    analyze.add("seed", int, 0, "recorded in artifact headers")

    freeze = _split_opts(Command("freeze-candidates",
                                 "draw the shared negative sets once", run_freeze))
    freeze.add("which", str, "test", "valid|test")
    freeze.add("window", int, 86400, "negative pool trailing window, seconds")
    freeze.add("n_negatives", int, 99, "negatives per click")
    freeze.add("max_clicks", int, 0, "subsample clicks; 0 = all")
    freeze.add("uniform", bool, False, "uniform instead of popularity sampling")
    freeze.add("seed", int, 0, "sampling seed")
    freeze.add("use_fallback_coverage", bool, False,
               "restrict pool to fallback-embedding coverage")
    _emb_opts(freeze)

    train_cmd = _split_opts(Command("train", "train the recommender", run_train))
    train_cmd.add("net", str, "", "network file")
    _emb_opts(train_cmd)
    train_cmd.add("hidden_size", int, 128, "GRU hidden size")
    train_cmd.add("heads", int, 4, "attention heads")
    train_cmd.add("head_dim", int, 32, "per-head channel width")
    for name, typ, default, help_text in [
            ("kind", str, "bprmax", "loss: top1max|bprmax|xe"),
            ("score_reg", float, 1.0, "score regularization weight"),
            ("n_negatives", int, 32, "train negatives per example"),
            ("batch_size", int, 256, "examples per optimizer step"),
            ("learning_rate", float, 1e-4, "initial learning rate"),
            ("decay_factor", float, 0.95, "lr multiplier per decay interval"),
            ("decay_interval", int, 1000, "optimizer steps between decays"),
            ("clip_norm", float, 5.0, "global gradient-norm clip"),
            ("weight_decay", float, 1e-5, "L2 weight decay"),
            ("dropout_input", float, 0.15, "input embedding dropout"),
            ("dropout_decoder", float, 0.2, "decoder input dropout"),
            ("epochs", int, 5, "training epochs"),
            ("seed", int, 0, "training seed"),
            ("seq_len", int, 20, "input events per encoding L"),
            ("neg_pool_window", int, 86400, "negative pool window, seconds"),
            ("uniform_negatives", bool, False, "uniform negative sampling"),
            ("max_examples_per_epoch", int, 0, "epoch subsample; 0 = all"),
            ("max_eval_clicks", int, 2000, "validation clicks per epoch"),
            ("eval_negatives", int, 99, "validation negatives per click"),
            ("patience", int, 0, "early-stop patience; 0 = off"),
            ("neighbor_off", bool, False, "train the sequence-only ablation")]:
        train_cmd.add(name, typ, default, help_text)

    ev = _split_opts(Command("evaluate", "score a model on frozen candidates",
                             run_evaluate))
    ev.add("model", str, "csrn", "csrn|gru|pop|itemcf|usercf")
    ev.add("checkpoint", str, "", "checkpoint file (csrn/gru)")
    ev.add("net", str, "", "network file (csrn/gru)")
    ev.add("candidates", str, "", "frozen candidates file")
    ev.add("seq_len", int, 20, "recent-history length for itemcf")
    ev.add("top_m", int, 50, "neighbor count for itemcf/usercf")
    _emb_opts(ev)

    rec = _split_opts(Command("recommend", "top-K items for a user", run_recommend))
    rec.add("checkpoint", str, "", "checkpoint file")
    rec.add("net", str, "", "network file")
    rec.add("user", str, "", "user id")
    rec.add("ts", int, 0, "prediction timestamp")
    rec.add("topk", int, 10, "items to print")
    _emb_opts(rec)

    gc = Command("gradcheck", "finite-difference gradient verification", run_gradcheck)
    gc.add("loss", str, "all", "top1max|bprmax|xe|all")
    gc.add("step", float, 1e-5, "central-difference step")
    gc.add("tolerance", float, 1e-4, "max relative error allowed")

    return [synth, ingest, build, analyze, freeze, train_cmd, ev, rec, gc]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="csrn",
        description="sequential news recommendation over a co-reading network")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in _commands():
        cmd.register(sub)
    try:
        args = parser.parse_args(argv)
        cmd = args._command
        cfg = cmd.resolve(args)
        if args.dump_config:
            dump_config(cfg)
            return 0
        os.makedirs(args.out, exist_ok=True)
        return cmd.runner(cfg, args.out)
    except (ConfigError, argparse.ArgumentTypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (corpus.ParseError, corpus.EmptyCorpusError,
            training.PoolExhaustedError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (training.NumericalError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
