"""Command line harness.

    crnt generate --spec cfg --out dir
    crnt train --config cfg --manifest m.jsonl --mode att_bias --out dir
    crnt decode --ckpt final.ckpt --manifest m.jsonl --beam 10 --out results.jsonl
    crnt eval --refs m.jsonl --hyps results.jsonl --report report.json
    crnt trace-attention --ckpt ... --manifest ... --out ... --trace-dir dir

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_config
from .context import ContextSet, normalize_metadata
from .data import features_for, generate_corpus, load_manifest
from .decoder import beam_search, dump_attention_trace, trace_for_tokens
from .metrics import EvalSample, compute_report, split_common
from .tokenizer import Vocabulary
from .train import train
from .transducer import ModelMode

MODES = [m.value for m in ModelMode]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the harness contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="crnt",
                     description="contextual transducer harness")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--spec", required=True, help="flat key = value config")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    for name, with_traces in (("decode", False), ("trace-attention", True)):
        p = sub.add_parser(name, help="beam-decode a manifest"
                           + (" and dump attention traces" if with_traces else ""))
        p.add_argument("--ckpt", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="results JSONL path")
        p.add_argument("--beam", type=int, default=10)
        p.add_argument("--max-symbols", type=int, default=5,
                       help="per-frame emission cap")
        p.add_argument("--vocab", default=None,
                       help="vocab.tsv (default: next to the checkpoint)")
        p.add_argument("--trace-dir", required=with_traces, default=None,
                       help="write one attention trace CSV per utterance")

    p = sub.add_parser("eval", help="score results against references")
    p.add_argument("--refs", required=True, help="reference manifest")
    p.add_argument("--hyps", required=True, help="results JSONL from decode")
    p.add_argument("--report", required=True, help="report JSON path")

    return parser


def _cmd_generate(args) -> int:
    cfg = load_config(args.spec)
    spec = cfg.synthetic_spec()
    train_path, test_path = generate_corpus(spec, cfg.n_train, cfg.n_test,
                                            args.out)
    print(f"wrote {train_path} ({cfg.n_train} utterances)")
    print(f"wrote {test_path} ({cfg.n_test} utterances)")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, args.manifest, ModelMode(args.mode), args.out,
                   resume=args.resume, quiet=False)
    print(f"wrote {result.final_checkpoint}")
    return 0


def _cmd_decode(args) -> int:
    vocab_path = args.vocab or Path(args.ckpt).parent / "vocab.tsv"
    vocab = Vocabulary.load(vocab_path)
    ckpt = load_checkpoint(args.ckpt, expected_vocab_sha256=vocab.checksum())
    model = ckpt.model
    records = load_manifest(args.manifest)
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir:
        trace_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as out:
        for rec in records:
            feats = features_for(args.manifest, rec)
            ctx = ContextSet.build(normalize_metadata(rec.metadata_words), vocab,
                                   skip_unencodable=True)
            hyps = beam_search(model, feats, ctx, beam_width=args.beam,
                               max_symbols_per_step=args.max_symbols)
            tokens, score = hyps[0]
            out.write(json.dumps({
                "utterance_id": rec.utterance_id,
                "hypothesis": vocab.decode(tokens),
                "log_score": score,
            }) + "\n")
            if trace_dir:
                trace = trace_for_tokens(model, ctx, tokens)
                dump_attention_trace(trace,
                                     trace_dir / f"{rec.utterance_id}.csv")
    print(f"wrote {args.out} ({len(records)} utterances)")
    return 0


def _load_hypotheses(path) -> dict[str, str]:
    hyps = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                uid = entry["utterance_id"]
                text = entry["hypothesis"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{ln}: malformed result: {e}") from e
            if uid in hyps:
                raise ValueError(f"{path}:{ln}: duplicate utterance {uid!r}")
            hyps[uid] = text
    return hyps


def _cmd_eval(args) -> int:
    records = load_manifest(args.refs, check_features=False)
    hyps = _load_hypotheses(args.hyps)
    samples = []
    for rec in records:
        if rec.utterance_id not in hyps:
            raise ValueError(f"{args.hyps}: no hypothesis for {rec.utterance_id!r}")
        ref = rec.transcript.split()
        flags = [False] * len(ref)
        for k in rec.entity_word_indices:
            flags[k] = True
        samples.append(EvalSample(
            utterance_id=rec.utterance_id,
            reference=ref,
            hypothesis=hyps[rec.utterance_id].split(),
            entity_flags=flags,
            metadata_words=set(normalize_metadata(rec.metadata_words)),
            video_id=rec.video_id,
        ))
    nonzero, zero = split_common(samples)
    report = {
        "all": compute_report(samples).to_dict(),
        "common_nonzero": (compute_report(nonzero, "common_nonzero").to_dict()
                           if nonzero else None),
        "common_zero": (compute_report(zero, "common_zero").to_dict()
                        if zero else None),
    }
    with open(args.report, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    for name in ("all", "common_nonzero", "common_zero"):
        r = report[name]
        if r is None:
            print(f"{name}: empty")
            continue
        wer_ne = "-" if r["wer_ne"] is None else f"{r['wer_ne']:.3f}"
        print(f"{name}: n={r['n_samples']} wer={r['wer']:.3f} wer_ne={wer_ne}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "decode": _cmd_decode,
    "trace-attention": _cmd_decode,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
