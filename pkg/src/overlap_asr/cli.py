"""Command-line harness: synth, train, transcribe, score, plot, run.

Exit codes: 0 success, 2 bad config, 3 data error, 4 training divergence.
Relative output paths are resolved under ``$OVERLAP_ASR_OUTPUT_ROOT`` when
that variable is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import acoustic
from .acoustic import AMConfig
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict, dump_config, load_config
from .corpus import (
    ToyWorld,
    form_segments,
    load_corpus,
    overlap_stats,
    read_rttm,
    save_conversation,
    synth_toy_corpus,
    write_rttm,
)
from .decode import ToyLM, build_graph, read_transcript_json, write_transcript_json, write_trn
from .diarization import DiarizerConfig, build_diarizer, diarizer_forward
from .evaluate import der_csv, der_table, score_pipeline, wer_csv, wer_table
from .experiment import (
    EVAL,
    TRAIN,
    corpus_seed,
    desk_config,
    make_corpora,
    report_json,
    run_experiment,
    segment_embeddings,
    train_am_stage,
    train_diarizer_stage,
)
from .features import InputError
from .pipeline import fit_lm, stacked_features, transcribe
from .training import TrainingDivergence, load_checkpoint, read_loss_csv, save_checkpoint, write_loss_csv

logger = logging.getLogger("overlap_asr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "OVERLAP_ASR_OUTPUT_ROOT"


def output_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _prepare_out(path, force: bool) -> Path:
    out = output_path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = cfg.diarizer_train.seed = cfg.am_train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.diarizer_train.epochs = cfg.am_train.epochs = args.epochs
    return cfg.validate()


def _stamp(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


def _corpus(path) -> list:
    convs = load_corpus(path)
    if not convs:
        raise InputError(f"no conversations found in {path}")
    return convs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    n = args.num_conversations
    if n is None:
        n = cfg.corpus.num_conversations if args.split == "train" else cfg.eval_conversations
    if n < 1:
        raise ConfigError("--num-conversations must be at least 1")
    out = _prepare_out(args.out, args.force)
    for stale in [*out.glob("*.json"), *out.glob("*.wav"), *out.glob("*.rttm")]:
        stale.unlink()
    split = TRAIN if args.split == "train" else EVAL
    spec = dataclasses.replace(cfg.corpus, num_conversations=n)
    convs = synth_toy_corpus(spec, corpus_seed(cfg.seed, split), args.split)
    for conv in convs:
        save_conversation(conv, out)
    stats = overlap_stats(convs)
    manifest = {**_stamp(cfg), "split": args.split, "stats": stats, "config": config_to_dict(cfg)}
    (out / "_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"{stats['num_conversations']} conversations, {stats['total_seconds']:.2f} s, "
          f"{stats['overlap_pct']:.2f}% of voiced frames overlapped")
    return EXIT_OK


def _load_diarizer(path):
    payload = load_checkpoint(path)
    if payload["kind"] != "diarizer":
        raise InputError(f"{path} is not a diarizer checkpoint")
    model = build_diarizer(DiarizerConfig(**payload["config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload


def _load_am(path):
    payload = load_checkpoint(path)
    if payload["kind"] not in acoustic.MODEL_KINDS:
        raise InputError(f"{path} is not an acoustic-model checkpoint")
    model = acoustic.build_am(payload["kind"], AMConfig(**payload["config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload


def cmd_train(args) -> int:
    cfg = _config(args)
    torch.set_num_threads(1)
    convs = _corpus(args.corpus)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = state = None
    if args.resume or args.init:
        loader = _load_diarizer if args.stage == "diar" else _load_am
        model, payload = loader(args.resume or args.init)
        model.train()
        if args.resume:
            state = payload["train_state"]
            if state is None:
                raise InputError(f"{args.resume} holds no training state to resume from")
    stamp = _stamp(cfg)
    if args.stage == "diar":
        name, kind, arch = "diarizer", "diarizer", cfg.diarizer
        extra = make_corpora(cfg)
        convs = convs + extra["diar_extra"] + extra["diar_single"]

        def train(on_epoch):
            return train_diarizer_stage(cfg, convs, model=model, state=state, on_epoch=on_epoch)
    else:
        kind = args.kind or cfg.am_kind
        name, arch = f"am-{kind}", cfg.am
        lm = fit_lm(convs, sorted(ToyWorld(cfg.corpus).lexicon), cfg.decode.lm_smoothing)
        stamp["lm"] = lm.to_dict()

        def train(on_epoch):
            return train_am_stage(cfg, kind, convs, model=model, state=state, on_epoch=on_epoch)

    def on_epoch(epoch, st, m):
        save_checkpoint(out / f"{name}.pt", kind, m, arch, st, stamp)

    trained, st = train(on_epoch)
    save_checkpoint(out / f"{name}.pt", kind, trained, arch, st, stamp)
    write_loss_csv(out / f"{name}_loss.csv", st["history"])
    (out / f"{name}_config.yaml").write_text(dump_config(cfg))
    print(f"trained {name}: {len(st['history'])} steps, final loss {st['history'][-1]['loss']:.4f}")
    return EXIT_OK


def cmd_transcribe(args) -> int:
    cfg = _config(args)
    torch.set_num_threads(1)
    if not args.ground_truth_activity and not args.diarizer:
        raise ConfigError("pass --diarizer CKPT or --ground-truth-activity")
    convs = _corpus(args.corpus)
    model, payload = _load_am(args.am)
    lm_dict = payload["extra"].get("lm")
    if lm_dict is None:
        raise InputError(f"{args.am} carries no language model")
    lm = ToyLM.from_dict(lm_dict)
    lexicon = ToyWorld(cfg.corpus).lexicon
    graph = build_graph(lexicon, lm, cfg.decode.lm_weight, cfg.decode.insertion_penalty, cfg.decode.silence_class)
    diar = _load_diarizer(args.diarizer)[0] if not args.ground_truth_activity else None
    out = _prepare_out(args.out, args.force)
    shift = cfg.features.frame_shift
    entries = []
    for conv in convs:
        x = stacked_features(conv, cfg.features)
        if diar is None:
            activity = conv.activity
        else:
            activity = diarizer_forward(x, diar, frame_shift=shift).activity()
        # the two conditions share everything below; only the activity source differs
        entries.extend(transcribe(conv.conv_id, x, activity.matrix, model, lexicon, lm, cfg.decode, shift, graph))
        write_rttm(out / "rttm" / f"{conv.conv_id}.rttm", conv.conv_id, activity)
        if args.dump_posteriors:
            _dump_posteriors(out / "posteriors", conv.conv_id, model, x, activity.matrix, payload["kind"], shift)
    write_transcript_json(out / "transcripts.json", entries)
    write_trn(out / "hyp.trn", entries)
    manifest = {**_stamp(cfg), "am_kind": payload["kind"],
                "activity_source": "ground-truth" if diar is None else "diarizer",
                "conversations": [c.conv_id for c in convs]}
    (out / "_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    streams = {(e.conv_id, e.speaker) for e in entries}
    print(f"decoded {len(convs)} conversations, {len(streams)} speaker streams")
    return EXIT_OK


def _dump_posteriors(directory, conv_id, model, x, activity, kind, shift):
    directory.mkdir(parents=True, exist_ok=True)
    for s in range(activity.shape[1]):
        post = acoustic.am_posteriors(model, x, activity[:, s]).astype(np.float32)
        np.save(directory / f"{conv_id}-spk{s}.npy", post)
        header = {"conv_id": conv_id, "speaker": s, "shape": list(post.shape), "dtype": "float32",
                  "frame_shift": shift, "am_kind": kind}
        (directory / f"{conv_id}-spk{s}.json").write_text(json.dumps(header, sort_keys=True))


def cmd_score(args) -> int:
    cfg = _config(args)
    convs = _corpus(args.ref)
    hyp = Path(args.hyp)
    tpath = hyp / "transcripts.json"
    if not tpath.exists():
        raise InputError(f"{tpath} not found")
    transcripts = read_transcript_json(tpath)
    manifest = json.loads((hyp / "_manifest.json").read_text()) if (hyp / "_manifest.json").exists() else {}
    system = args.name or f"{manifest.get('am_kind', 'system')}/{manifest.get('activity_source', 'unknown')}"
    acts = {}
    for conv in convs:
        p = hyp / "rttm" / f"{conv.conv_id}.rttm"
        if not p.exists():
            raise InputError(f"missing hypothesis RTTM {p}")
        acts[conv.conv_id] = read_rttm(p, conv.num_frames, conv.activity.frame_shift, speakers=["spk0", "spk1"])
    sc = cfg.scoring
    rep = score_pipeline(convs, acts, transcripts, sc.min_gap, sc.collar, sc.correlation)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    der_rows = [(system, "W overlap", rep.der), (system, "W/o overlap", rep.der_no_overlap)]
    (out / "der.csv").write_text(der_csv(der_rows))
    (out / "wer.csv").write_text(wer_csv([(system, rep)]))
    (out / "report.json").write_text(report_json({**_stamp(cfg), "system": system, **rep.to_dict()}))
    print(der_table({f"{system} (W overlap)": rep.der, f"{system} (W/o overlap)": rep.der_no_overlap}))
    print()
    print(wer_table({system: {"WER": rep.aggregate.wer_pct}}, columns=("WER",)))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if args.kind == "loss":
        if not args.csv:
            raise InputError("plot loss needs at least one --csv file")
        for path in args.csv:
            rows = read_loss_csv(path)
            if not rows:
                raise InputError(f"{path} holds no loss values")
            ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=Path(path).stem)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        ax.legend()
    else:
        cfg = _config(args)
        if not args.am:
            raise InputError(f"plot {args.kind} needs --am CKPT")
        convs = _corpus(args.corpus)
        model, payload = _load_am(args.am)
        if not acoustic.is_conditioned(model):
            raise InputError("embedding and senone plots need a speaker-conditioned model")
        if args.kind == "embeddings":
            # one conversation when named, otherwise every type-C segment in the corpus
            chosen = [_pick_conversation(convs, args.conversation, cfg)] if args.conversation else convs
            _plot_embeddings(ax, model, chosen, cfg, args.seed or 0)
        else:
            conv = _pick_conversation(convs, args.conversation, cfg)
            x = stacked_features(conv, cfg.features)
            _plot_senones(ax, model, conv, x, args.speaker, args.start, args.frames)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def _pick_conversation(convs, conv_id, cfg):
    if conv_id:
        for c in convs:
            if c.conv_id == conv_id:
                return c
        raise InputError(f"conversation {conv_id} not in corpus")
    counts = [sum(s.kind == "C" for s in form_segments(c.activity, cfg.augment.min_silence)) for c in convs]
    return convs[int(np.argmax(counts))]


def _plot_embeddings(ax, model, convs, cfg, seed):
    pts = []
    for conv in convs:
        x = stacked_features(conv, cfg.features)
        pts += segment_embeddings(model, conv, x, ("C",), cfg.augment.min_silence)
    name = convs[0].conv_id if len(convs) == 1 else f"{len(convs)} conversations"
    if len(pts) < 5:
        raise InputError(f"{name} has too few type-C segments for a projection")
    xy = acoustic.project_embeddings_2d(np.stack([p[2] for p in pts]), seed)
    channels = np.array([p[1] for p in pts])
    for s, marker in ((0, "o"), (1, "^")):
        sel = channels == s
        ax.scatter(xy[sel, 0], xy[sel, 1], marker=marker, label=f"C-{'AB'[s]}")
    ax.set_title(f"type-C speaker embeddings, {name}")
    ax.legend()


def _plot_senones(ax, model, conv, x, speaker, start, frames):
    if speaker not in (0, 1):
        raise InputError("--speaker must be 0 or 1")
    act = conv.activity.matrix[:, speaker]
    post = acoustic.am_posteriors(model, x, act)
    sl = slice(start, min(start + frames, len(post)))
    if sl.stop <= sl.start:
        raise InputError("empty frame range")
    t = np.arange(sl.start, sl.stop)
    ax.plot(t, conv.alignments[sl, speaker], ".", label="target senone", alpha=0.6)
    ax.plot(t, post[sl].argmax(1), "x", label="predicted senone", alpha=0.6)
    ax.set_ylabel("senone index")
    ax.set_xlabel("frame")
    twin = ax.twinx()
    twin.plot(t, act[sl], "k--", label="speaker activity")
    twin.set_ylim(-0.05, 1.5)
    twin.set_ylabel("activity")
    ax.legend(loc="upper left")


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out or cfg.output_dir, args.force)
    report, timings = run_experiment(cfg, out)
    print(report_json({k: report[k] for k in ("seed", "config_hash", "corpus", "diarizer")}))
    for kind, m in report["models"].items():
        print(f"{kind:<10} overlap acc {m['overlap_frame_accuracy']:6.2f}  WER GTS {m['wer_gts']:6.2f}  "
              f"WER diarizer {m['wer_diarizer']:6.2f}")
    print(f"total {timings['total_s']:.0f} s")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _config(args)
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="overlap-asr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (default: built-in desk config)")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("synth", help="write a toy corpus (stereo WAV + JSON + RTTM)"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "eval"), default="train")
    sp.add_argument("--num-conversations", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train the diarizer or an acoustic model"))
    sp.add_argument("--stage", choices=("diar", "am"), required=True)
    sp.add_argument("--kind", choices=acoustic.MODEL_KINDS)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--init", help="checkpoint to fine-tune from")
    sp.add_argument("--resume", help="checkpoint to resume (model + optimizer state)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("transcribe", help="diarize (or use reference activity) and decode"))
    sp.add_argument("--am", required=True)
    sp.add_argument("--diarizer")
    sp.add_argument("--ground-truth-activity", action="store_true",
                    help="use the reference speaker activity instead of the diarizer (GTS condition)")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-posteriors", action="store_true")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_transcribe)

    sp = common(sub.add_parser("score", help="DER (with and without overlap) and WER reports"))
    sp.add_argument("--ref", required=True, help="reference corpus directory")
    sp.add_argument("--hyp", required=True, help="transcribe output directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", help="system label in the tables")
    sp.set_defaults(func=cmd_score)

    sp = common(sub.add_parser("plot", help="loss curves, embedding scatter or senone tracks"))
    sp.add_argument("kind", choices=("loss", "embeddings", "senones"))
    sp.add_argument("--out", required=True, help="image file")
    sp.add_argument("--csv", nargs="*", default=[])
    sp.add_argument("--am")
    sp.add_argument("--corpus")
    sp.add_argument("--conversation")
    sp.add_argument("--speaker", type=int, default=0)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--frames", type=int, default=300)
    sp.set_defaults(func=cmd_plot)

    sp = common(sub.add_parser("run", help="full desk-scale experiment for one seed"))
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = common(sub.add_parser("config", help="print the effective config as YAML"))
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
