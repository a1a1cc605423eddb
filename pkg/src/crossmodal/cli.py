"""Command-line entry point: ``crossmodal <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on unusable input
data. Diagnostics go to standard error; data goes to files or standard
output.
"""

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from . import chroma as chroma_mod
from . import embedding as emb
from . import fingerprint as fp
from . import follower as fol
from .datagen import generate_corpus
from .exceptions import DataError
from .matching import DEFAULT_THRESHOLD, rank_documents, ranked_to_csv
from .notes_io import load_notes, save_notes
from .synth import DEFAULT_HARMONICS, DEFAULT_SAMPLE_RATE, read_wav, render_audio, write_wav

NOTE_SUFFIXES = (".csv", ".mid", ".midi")
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _emit(text, out):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _load_corpus(directory):
    path = Path(directory)
    if not path.is_dir():
        raise DataError(f"corpus directory not found: {directory}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in NOTE_SUFFIXES)
    if not files:
        raise DataError(f"no note files (.csv, .mid) in {directory}")
    return [load_notes(p) for p in files]


def _load_chroma_input(path, frame_rate):
    """Chromagram from a WAV, a chroma CSV or a note file."""
    p = Path(path)
    if p.suffix.lower() == ".wav":
        return chroma_mod.audio_chromagram(read_wav(p))
    if p.suffix.lower() == ".csv":
        text = p.read_text(encoding="utf-8")
        if text.startswith("# frame_rate="):
            return chroma_mod.chroma_from_csv(text)
    return chroma_mod.symbolic_chromagram(load_notes(p), frame_rate)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    seq = load_notes(args.input)
    write_wav(render_audio(seq, args.sample_rate, args.harmonics), args.out)


def cmd_chroma(args):
    p = Path(args.input)
    if p.suffix.lower() == ".wav":
        c = chroma_mod.audio_chromagram(read_wav(p), args.window, args.hop)
    else:
        c = chroma_mod.symbolic_chromagram(load_notes(p), args.frame_rate)
    _emit(chroma_mod.chroma_to_csv(c), args.out)


def cmd_match(args):
    query = _load_chroma_input(args.query, args.frame_rate)
    corpus = [(seq.id, chroma_mod.symbolic_chromagram(seq, query.frame_rate))
              for seq in _load_corpus(args.corpus)]
    ranked = rank_documents(query, corpus, args.threshold, args.exclusion,
                            args.transpositions, args.jobs)
    for doc_id, reason in ranked.skipped:
        print(f"skipped {doc_id}: {reason}", file=sys.stderr)
    _emit(ranked_to_csv(ranked, args.top), args.out)


def cmd_fp_index(args):
    constraints = fp.ExtractionConstraints(args.d_min, args.d_max, args.fanout)
    index = fp.build_index(_load_corpus(args.corpus), constraints, args.bins_per_octave)
    for piece_id, reason in index.skipped:
        print(f"skipped {piece_id}: {reason}", file=sys.stderr)
    fp.save_index(index, args.out)
    if args.json:
        _emit(fp.index_to_json(index), args.json)
    print(f"indexed {len(index.piece_ids)} pieces, {len(index)} keys, "
          f"{index.n_postings} postings", file=sys.stderr)


def cmd_fp_query(args):
    index = fp.load_index(args.index)
    hyps = fp.query_index(index, load_notes(args.query), args.tolerance,
                          args.bin_width, args.top)
    _emit(fp.hypotheses_to_csv(hyps), args.out)


def cmd_follow(args):
    index = fp.load_index(args.index)
    config = fol.CompanionConfig(
        buffer_seconds=args.buffer, eval_interval=args.eval_interval, margin=args.margin,
        consecutive=args.consecutive, confidence_threshold=args.confidence,
        width=args.width, frame_rate=args.frame_rate,
    )
    companion = fol.Companion.from_corpus(index, _load_corpus(args.corpus), config)
    if args.input in (None, "-"):
        text = sys.stdin.read()
    else:
        text = Path(args.input).read_text(encoding="utf-8")
    stream = fol.parse_stream(text, args.frame_rate)
    driver = fol.run_concurrent if args.concurrent else fol.run_sequential
    _emit(fol.trace_to_csv(driver(companion, stream)), args.out)


def cmd_gen_data(args):
    if args.corpus:
        corpus = _load_corpus(args.corpus)
    else:
        corpus = generate_corpus(args.pieces, args.notes, seed=args.seed)
    if args.pieces_out:
        os.makedirs(args.pieces_out, exist_ok=True)
        for seq in corpus:
            save_notes(seq, Path(args.pieces_out) / f"{seq.id}.csv")
    snippets, excerpts, infos = emb.sample_pairs(corpus, args.pairs, args.window,
                                                 args.augment, seed=args.seed)
    emb.save_dataset(args.out, snippets, excerpts, infos)


def cmd_embed_train(args):
    snippets, excerpts, _ = emb.load_dataset(args.data)
    config = emb.EmbedConfig(args.gamma, args.batch_size, args.learning_rate, args.epochs,
                             args.seed, args.hidden, args.dim, args.symmetric)
    params, trace = emb.train(snippets, excerpts, config)
    emb.save_params(params, args.out)
    if args.loss_out:
        _emit(emb.loss_trace_to_csv(trace), args.loss_out)


def cmd_embed_query(args):
    params = emb.load_params(args.model)
    snippets, _, cand_infos = emb.load_dataset(args.candidates)
    _, excerpts, query_infos = emb.load_dataset(args.queries)
    cand = emb.forward(params.snippet, snippets.reshape(len(snippets), -1))
    queries = emb.forward(params.excerpt, excerpts.reshape(len(excerpts), -1))
    corpus = [(info.pair_id, vec) for info, vec in zip(cand_infos, cand)]
    piece_of = {info.pair_id: info.piece_id for info in cand_infos}
    rows = ["query_id,query_piece,rank,snippet_id,snippet_piece,score"]
    top1 = {}
    for info, vec in zip(query_infos, queries):
        hits = emb.retrieve(corpus, vec, args.top)
        top1.setdefault(info.piece_id, []).append(piece_of[hits[0][0]])
        for rank, (sid, score) in enumerate(hits, start=1):
            rows.append(f"{info.pair_id},{info.piece_id},{rank},{sid},{piece_of[sid]},{score!r}")
    _emit("\n".join(rows) + "\n", args.out)
    if args.votes:
        lines = ["piece_id,n_excerpts,voted_piece"]
        for piece in sorted(top1):
            lines.append(f"{piece},{len(top1[piece])},{emb.majority_vote(top1[piece])}")
        _emit("\n".join(lines) + "\n", args.votes)


# --------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for all randomness")
    common.add_argument("--version", action="version", version=f"crossmodal {__version__}")

    parser = _Parser(prog="crossmodal", description="Cross-modal music retrieval toolkit.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "render a note file to a 16-bit mono WAV")
    p.add_argument("--in", dest="input", required=True, help="note CSV or MIDI file")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--sample-rate", type=int, default=DEFAULT_SAMPLE_RATE)
    p.add_argument("--harmonics", type=int, default=DEFAULT_HARMONICS)

    p = add("chroma", cmd_chroma, "chromagram of a note file or WAV as CSV")
    p.add_argument("--in", dest="input", required=True, help="note CSV/MIDI or WAV file")
    p.add_argument("--out", default="-", help="output CSV ('-' for stdout)")
    p.add_argument("--frame-rate", type=float, default=chroma_mod.DEFAULT_FRAME_RATE,
                   help="frames per second for note input")
    p.add_argument("--window", type=int, default=chroma_mod.DEFAULT_WINDOW, help="STFT window (samples)")
    p.add_argument("--hop", type=int, default=chroma_mod.DEFAULT_HOP, help="STFT hop (samples)")

    p = add("match", cmd_match, "rank corpus segments matching a query by subsequence DTW")
    p.add_argument("--query", required=True, help="note CSV/MIDI, chroma CSV or WAV")
    p.add_argument("--corpus", required=True, help="directory of note CSV/MIDI files")
    p.add_argument("--top", type=int, default=None, help="number of rows (all when omitted)")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--exclusion", type=int, default=None,
                   help="frames blanked around each minimum (half the query length when omitted)")
    p.add_argument("--transpositions", action="store_true", help="search all 12 transpositions")
    p.add_argument("--frame-rate", type=float, default=chroma_mod.DEFAULT_FRAME_RATE)
    p.add_argument("--jobs", type=int, default=None, help="worker threads")
    p.add_argument("--out", default="-")

    p = add("fp-index", cmd_fp_index, "build a symbolic fingerprint index")
    p.add_argument("--corpus", required=True, help="directory of note CSV/MIDI files")
    p.add_argument("--out", required=True, help="output index file")
    p.add_argument("--d-min", type=float, default=fp.DEFAULT_D_MIN)
    p.add_argument("--d-max", type=float, default=fp.DEFAULT_D_MAX)
    p.add_argument("--fanout", type=int, default=fp.DEFAULT_FANOUT)
    p.add_argument("--bins-per-octave", type=int, default=fp.DEFAULT_BINS_PER_OCTAVE)
    p.add_argument("--json", default=None, help="also write a JSON dump here")

    p = add("fp-query", cmd_fp_query, "identify a note excerpt against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True, help="note CSV or MIDI file")
    p.add_argument("--tolerance", type=int, default=fp.DEFAULT_TAU_TOLERANCE,
                   help="neighbouring tau buckets to probe")
    p.add_argument("--bin-width", type=float, default=fp.DEFAULT_BIN_WIDTH, help="seconds")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", default="-")

    defaults = fol.CompanionConfig()
    p = add("follow", cmd_follow, "follow an event/frame stream and write a hypothesis trace")
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True, help="directory of the indexed note files")
    p.add_argument("--in", dest="input", default="-", help="stream file ('-' for stdin)")
    p.add_argument("--out", default="-")
    p.add_argument("--buffer", type=float, default=defaults.buffer_seconds, help="seconds")
    p.add_argument("--eval-interval", type=float, default=defaults.eval_interval, help="seconds")
    p.add_argument("--margin", type=float, default=defaults.margin)
    p.add_argument("--consecutive", type=int, default=defaults.consecutive)
    p.add_argument("--confidence", type=float, default=defaults.confidence_threshold)
    p.add_argument("--width", type=int, default=defaults.width, help="tracker window (frames)")
    p.add_argument("--frame-rate", type=float, default=defaults.frame_rate)
    p.add_argument("--concurrent", action="store_true", help="identify on a worker thread")

    p = add("gen-data", cmd_gen_data, "generate a synthetic snippet/excerpt pair dataset")
    p.add_argument("--out", required=True, help="dataset file (sidecar gets '.json' appended)")
    p.add_argument("--corpus", default=None, help="use these note files instead of generated pieces")
    p.add_argument("--pieces", type=int, default=10)
    p.add_argument("--notes", type=int, default=300, help="notes per generated piece")
    p.add_argument("--pieces-out", default=None, help="also write the pieces as CSVs here")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--window", type=float, default=emb.DEFAULT_WINDOW, help="seconds")
    p.add_argument("--augment", action="store_true")

    cfg = emb.EmbedConfig()
    p = add("embed-train", cmd_embed_train, "train the two embedding pathways")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--loss-out", default=None, help="loss trace CSV")
    p.add_argument("--gamma", type=float, default=cfg.gamma)
    p.add_argument("--batch-size", type=int, default=cfg.batch_size)
    p.add_argument("--learning-rate", type=float, default=cfg.learning_rate)
    p.add_argument("--epochs", type=int, default=cfg.epochs)
    p.add_argument("--hidden", type=int, default=cfg.hidden)
    p.add_argument("--dim", type=int, default=cfg.dim)
    p.add_argument("--symmetric", action="store_true", help="add the excerpt-to-snippet hinge")

    p = add("embed-query", cmd_embed_query, "retrieve snippets for excerpts with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--candidates", required=True, help="dataset whose snippets are searched")
    p.add_argument("--queries", required=True, help="dataset whose excerpts are the queries")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", default="-")
    p.add_argument("--votes", default=None, help="per-piece majority vote CSV")
    for action in sub.choices.values():
        for opt in action._actions:
            if opt.help is None:
                opt.help = "required" if opt.required else "default: %(default)s"
    parser.subcommands = sub.choices
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report stray flags with the subcommand's own help
            parser.subcommands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
        args.func(args)
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, TypeError) as exc:
        # DataError is a ValueError; other ValueErrors here are bad option values
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, DataError) else 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
