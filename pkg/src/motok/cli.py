"""Command-line entry points for corpus generation, training, reconstruction,
generation, and evaluation.

Model-module imports happen inside the handlers so that --device-threads can
pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

OUT_DIR_ENV = "MOTOK_OUT_DIR"


class DependencyError(RuntimeError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"missing checkpoint dependency: {name} ({detail})")
        self.name = name


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motok",
        description="Whole-body motion tokenization, generation, and evaluation")
    parser.add_argument("--device-threads", type=int, default=None,
                        help="pin the BLAS/OpenMP thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=None,
                       help=f"output root (default: ${OUT_DIR_ENV} or ./out)")
        p.add_argument("--config", default=None,
                       help="JSON file with per-section config overrides")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--items-per-family", type=int, default=None)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("train-vq", help="train a motion codec")
    common(p)
    p.add_argument("--variant", choices=("vanilla", "rvq", "h2vq"),
                   default="h2vq")
    p.add_argument("--corpus", required=True, help="corpus manifest path")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--codebook-size", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("train-tmr", help="train the text-motion retrieval model")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("train-gpt", help="train the hierarchical token generator")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tmr", default=None, help="retrieval checkpoint")
    p.add_argument("--codec", default=None, help="hierarchical codec checkpoint")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("train-face", help="train the facial generator")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("reconstruct", help="reconstruction benchmark table")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", action="append", required=True,
                   help="codec checkpoint (repeatable)")
    p.add_argument("--split", default="test")

    p = sub.add_parser("generate", help="text-conditioned whole-body generation")
    common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--gpt", default=None)
    p.add_argument("--codec", default=None)
    p.add_argument("--tmr", default=None)
    p.add_argument("--face", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--name", default="generated")

    p = sub.add_parser("evaluate", help="generation metric suite")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--gpt", default=None)
    p.add_argument("--codec", default=None)
    p.add_argument("--tmr", default=None)
    p.add_argument("--face", default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--mmodality-texts", type=int, default=8)
    p.add_argument("--split", default="test")

    p = sub.add_parser("retrieval-eval", help="retrieval protocols A-D")
    common(p)
    p.add_argument("--protocol", choices=tuple("ABCD"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tmr", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--pool-seed", type=int, default=0)

    return parser


def resolve_out_dir(args) -> Path:
    out = args.out_dir or os.environ.get(OUT_DIR_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_overrides(args) -> dict:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise DependencyError("config", f"{path} not found")
    return json.loads(path.read_text())


def section_config(cls, overrides: dict, section: str, **direct):
    from .config import config_from_dict, config_to_dict
    base = config_to_dict(cls())
    base.update(overrides.get(section, {}))
    for key, value in direct.items():
        if value is not None:
            base[key] = value
    return config_from_dict(base)


def record_provenance(out_dir: Path, args, config_obj=None) -> None:
    import datetime

    from .config import config_hash
    entry = {
        "command": args.command,
        "argv": sys.argv[1:] if sys.argv[0].endswith(("motok", "cli.py")) else
                [args.command],
        "seed": getattr(args, "seed", None),
        "config_hash": config_hash(config_obj) if config_obj is not None else None,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(out_dir / "provenance.jsonl", "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def _require_checkpoint(path, name: str):
    if path is None:
        raise DependencyError(name, f"--{name} flag not provided")
    if not Path(path).exists():
        raise DependencyError(name, f"{path} does not exist")
    return path


def _load_corpus(path):
    from .corpusio import load_corpus
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise DependencyError("corpus", f"{manifest} does not exist")
    return load_corpus(manifest)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    from .config import CorpusConfig
    from .corpusio import gen_corpus, save_corpus
    overrides = load_overrides(args)
    cfg = section_config(CorpusConfig, overrides, "corpus", seed=args.seed,
                         items_per_family=args.items_per_family,
                         min_length=args.min_len, max_length=args.max_len)
    out = resolve_out_dir(args)
    items = gen_corpus(cfg)
    manifest = save_corpus(out, items, cfg)
    record_provenance(out, args, cfg)
    print(f"corpus: {len(items)} items")
    print(f"manifest: {manifest}")
    return 0


def cmd_train_vq(args) -> int:
    import numpy as np

    from .config import CodecConfig
    from .corpusio import save_checkpoint
    from .motioncodec import codec_blocks, train_codec
    overrides = load_overrides(args)
    cfg = section_config(CodecConfig, overrides, "codec", variant=args.variant,
                         codebook_size=args.codebook_size,
                         rvq_levels=args.levels, batch_size=args.batch_size)
    items, skel = _load_corpus(args.corpus)
    out = resolve_out_dir(args)
    model, opt, history = train_codec(items, skel, cfg, seed=args.seed,
                                      steps=args.steps)
    ck_path = out / f"codec_{cfg.variant}.ckpt"
    from .config import config_to_dict
    ck_config = {"model": config_to_dict(cfg),
                 "skeleton": {"joint_count": skel.joint_count,
                              "frame_rate": skel.frame_rate}}
    save_checkpoint(ck_path, f"codec:{cfg.variant}", ck_config,
                    codec_blocks(model, opt), step=args.steps)
    record_provenance(out, args, cfg)
    final = float(np.mean([h["total"] for h in history[-50:]]))
    print(f"final loss (50-step mean): {final:.6f}")
    print(f"checkpoint: {ck_path}")
    return 0


def cmd_train_tmr(args) -> int:
    import numpy as np

    from .config import TMRConfig, config_to_dict
    from .corpusio import save_checkpoint
    from .motionrep import motion_layout
    from .tmr import tmr_blocks, tmr_vocab_payload, train_tmr
    overrides = load_overrides(args)
    cfg = section_config(TMRConfig, overrides, "tmr", batch_size=args.batch_size)
    items, skel = _load_corpus(args.corpus)
    out = resolve_out_dir(args)
    model, opt, history = train_tmr(items, skel, cfg, seed=args.seed,
                                    steps=args.steps)
    layout = motion_layout(skel)
    ck_path = out / "tmr.ckpt"
    ck_config = {"model": config_to_dict(cfg),
                 "vocab": tmr_vocab_payload(model),
                 "motion_dim": layout.d_b + layout.d_h}
    save_checkpoint(ck_path, "tmr", ck_config, tmr_blocks(model, opt),
                    step=args.steps)
    record_provenance(out, args, cfg)
    print(f"final loss (50-step mean): "
          f"{float(np.mean([h['total'] for h in history[-50:]])):.6f}")
    print(f"checkpoint: {ck_path}")
    return 0


def _load_tmr(path):
    from .config import config_from_dict
    from .corpusio import load_checkpoint
    from .tmr import tmr_from_blocks
    ck = load_checkpoint(path, expected_module="tmr")
    cfg = config_from_dict(ck.config["model"])
    return tmr_from_blocks(ck.blocks, ck.config["vocab"],
                           int(ck.config["motion_dim"]), cfg)


def _load_codec(path, expected_variant=None):
    from .config import config_from_dict
    from .corpusio import load_checkpoint
    from .motionrep import default_skeleton, motion_layout
    from .motioncodec import codec_from_blocks
    ck = load_checkpoint(path)
    if not ck.module_id.startswith("codec:"):
        raise DependencyError("codec", f"{path} holds '{ck.module_id}'")
    if expected_variant and ck.module_id != f"codec:{expected_variant}":
        raise DependencyError("codec", f"{path} is {ck.module_id}, expected "
                                       f"codec:{expected_variant}")
    cfg = config_from_dict(ck.config["model"])
    skel = default_skeleton(ck.config["skeleton"]["frame_rate"])
    layout = motion_layout(skel)
    return codec_from_blocks(ck.blocks, layout, cfg), skel, ck


def _load_face(path):
    from .config import config_from_dict
    from .corpusio import load_checkpoint
    from .facecvae import face_from_blocks
    ck = load_checkpoint(path, expected_module="facecvae")
    cfg = config_from_dict(ck.config["model"])
    return face_from_blocks(ck.blocks, ck.config["vocab"], cfg)


def _load_gpt(path):
    import numpy as np

    from .config import config_from_dict
    from .corpusio import load_checkpoint
    from .hgpt import HierarchicalGPT, TokenVocabulary
    ck = load_checkpoint(path, expected_module="hgpt")
    cfg = config_from_dict(ck.config["model"])
    vocab = TokenVocabulary(ck.config["vocab"]["body"], ck.config["vocab"]["hand"])
    model = HierarchicalGPT(np.random.default_rng(0), vocab,
                            int(ck.config["text_dim"]), cfg)
    model.load_state_dict(ck.blocks)
    model.name_parameters()
    return model


def cmd_train_gpt(args) -> int:
    import numpy as np

    from .config import GPTConfig, config_to_dict
    from .corpusio import save_checkpoint
    from .hgpt import TokenVocabulary, build_stream, train_gpt
    from .motioncodec import normalized_parts
    from .motionrep import motion_layout
    from .tmr import text_embeddings
    overrides = load_overrides(args)
    cfg = section_config(GPTConfig, overrides, "gpt", eta=args.eta,
                         batch_size=args.batch_size)
    items, skel = _load_corpus(args.corpus)
    tmr_model = _load_tmr(_require_checkpoint(args.tmr, "tmr"))
    codec, _, codec_ck = _load_codec(_require_checkpoint(args.codec, "codec"),
                                     expected_variant="h2vq")
    tmr_model.set_trainable(False)
    codec.set_trainable(False)
    out = resolve_out_dir(args)

    layout = motion_layout(skel)
    train = [it for it in items if it.split == "train"]
    vocab = TokenVocabulary(codec.cfg.codebook_size, codec.cfg.codebook_size)
    streams, texts = [], []
    for it in train:
        mb, mh = normalized_parts(it, layout, codec.stats)
        L = (mb.shape[0] // codec.cfg.hand_rate) * codec.cfg.hand_rate
        idx_h, idx_b = codec.encode(mb[:L], mh[:L])
        streams.append(build_stream(idx_b, idx_h, vocab))
        texts.append(it.text)
    embs = text_embeddings(tmr_model, texts)

    model, opt, history = train_gpt(streams, embs, texts, vocab, cfg,
                                    seed=args.seed, steps=args.steps,
                                    codec=codec, tmr_model=tmr_model)
    ck_path = out / "hgpt.ckpt"
    ck_config = {"model": config_to_dict(cfg),
                 "vocab": {"body": vocab.body_size, "hand": vocab.hand_size},
                 "text_dim": int(embs.shape[1])}
    blocks = dict(model.state_dict())
    blocks.update(opt.state_blocks())
    save_checkpoint(ck_path, "hgpt", ck_config, blocks, step=args.steps)
    record_provenance(out, args, cfg)
    print(f"final loss (50-step mean): "
          f"{float(np.mean([h['total'] for h in history[-50:]])):.6f}")
    print(f"checkpoint: {ck_path}")
    return 0


def cmd_train_face(args) -> int:
    import numpy as np

    from .config import FaceConfig, config_to_dict
    from .corpusio import save_checkpoint
    from .facecvae import face_blocks, face_vocab_payload, train_face
    overrides = load_overrides(args)
    cfg = section_config(FaceConfig, overrides, "face",
                         batch_size=args.batch_size)
    items, _ = _load_corpus(args.corpus)
    out = resolve_out_dir(args)
    model, opt, history = train_face(items, cfg, seed=args.seed,
                                     steps=args.steps)
    ck_path = out / "face.ckpt"
    ck_config = {"model": config_to_dict(cfg),
                 "vocab": face_vocab_payload(model)}
    save_checkpoint(ck_path, "facecvae", ck_config, face_blocks(model, opt),
                    step=args.steps)
    record_provenance(out, args, cfg)
    print(f"final loss (50-step mean): "
          f"{float(np.mean([h['total'] for h in history[-50:]])):.6f}")
    print(f"checkpoint: {ck_path}")
    return 0


def cmd_reconstruct(args) -> int:
    from .motioncodec import format_benchmark, reconstruction_benchmark
    from .corpusio import split_items
    items, skel = _load_corpus(args.corpus)
    split = split_items(items, args.split) or items
    models = {}
    for path in args.codec:
        model, _, ck = _load_codec(_require_checkpoint(path, "codec"))
        models[ck.module_id.split(":", 1)[1]] = model
    out = resolve_out_dir(args)
    table = reconstruction_benchmark(models, split, skel)
    text = format_benchmark(table)
    report = out / "reconstruction.tsv"
    report.write_text(text)
    (out / "reconstruction.json").write_text(json.dumps(table, indent=1))
    record_provenance(out, args)
    print(text, end="")
    print(f"report: {report}")
    return 0


def generate_motion(gpt_model, codec, tmr_model, face_model, layout,
                    text: str, length: int, seed: int, temperature=None,
                    top_k=None):
    """Length-exact whole-body generation; returns a MotionRepr."""
    import numpy as np

    from .facecvae import assemble_whole_body, generate_face
    from .hgpt import sample
    from .tmr import text_prior

    n_super = -(-length // codec.cfg.hand_rate)  # ceil
    rng = np.random.default_rng(np.random.SeedSequence((seed, 71)))
    emb = text_prior(tmr_model, text)
    body, hand, _ = sample(gpt_model, emb, max_super_steps=n_super, rng=rng,
                           temperature=temperature, top_k=top_k,
                           min_super_steps=n_super)
    mb, mh = codec.decode(body, hand)
    stats = codec.stats
    mb = mb * stats.std_b + stats.mean_b
    mh = mh * stats.std_h + stats.mean_h
    bh = np.concatenate([mb, mh], axis=1)[:length]
    face_rng = np.random.default_rng(np.random.SeedSequence((seed, 72)))
    face = generate_face(face_model, text, length, face_rng)
    return assemble_whole_body(bh, face, layout)


def cmd_generate(args) -> int:
    from .corpusio import save_motion_file
    from .motionrep import motion_layout
    gpt_model = _load_gpt(_require_checkpoint(args.gpt, "gpt"))
    tmr_model = _load_tmr(_require_checkpoint(args.tmr, "tmr"))
    codec, skel, _ = _load_codec(_require_checkpoint(args.codec, "codec"),
                                 expected_variant="h2vq")
    face_model = _load_face(_require_checkpoint(args.face, "face"))
    tmr_model.set_trainable(False)
    out = resolve_out_dir(args)
    rep = generate_motion(gpt_model, codec, tmr_model, face_model,
                          motion_layout(skel), args.text, args.length,
                          args.seed, temperature=args.temperature,
                          top_k=args.top_k)
    path = out / f"{args.name}.tmto"
    save_motion_file(path, rep, skel)
    record_provenance(out, args)
    print(f"motion: {path} ({rep.length} frames x {rep.frames.shape[1]})")
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from .config import EVAL_REPETITIONS
    from .corpusio import split_items
    from .metrics import FeatureSet, evaluate_suite, format_report
    from .motionrep import motion_layout, split_parts
    from .tmr import body_hand_features, motion_embeddings, text_embeddings

    items, skel = _load_corpus(args.corpus)
    split = split_items(items, args.split) or items
    gpt_model = _load_gpt(_require_checkpoint(args.gpt, "gpt"))
    tmr_model = _load_tmr(_require_checkpoint(args.tmr, "tmr"))
    codec, _, _ = _load_codec(_require_checkpoint(args.codec, "codec"),
                              expected_variant="h2vq")
    face_model = _load_face(_require_checkpoint(args.face, "face"))
    tmr_model.set_trainable(False)
    out = resolve_out_dir(args)
    layout = motion_layout(skel)
    reps = args.repetitions or EVAL_REPETITIONS

    texts = [it.text for it in split]
    t_emb = text_embeddings(tmr_model, texts)

    def embed(frames_list):
        feats = [tmr_model.normalize_motion(body_hand_features(f, layout))
                 for f in frames_list]
        return motion_embeddings(tmr_model, feats)

    real = embed([it.repr.frames for it in split])
    gen_frames = []
    for i, it in enumerate(split):
        rep = generate_motion(gpt_model, codec, tmr_model, face_model, layout,
                              it.text, it.length, seed=args.seed * 100003 + i)
        gen_frames.append(rep.frames)
    gen = embed(gen_frames)

    m_texts = texts[:args.mmodality_texts]
    per_text = []
    for k, text in enumerate(m_texts):
        gens = []
        for g in range(10):
            rep = generate_motion(gpt_model, codec, tmr_model, face_model,
                                  layout, text, split[k].length,
                                  seed=args.seed * 7919 + k * 100 + g)
            gens.append(rep.frames)
        per_text.append(embed(gens))

    report = evaluate_suite(
        FeatureSet(real, "tmr-motion-encoder"),
        FeatureSet(gen, "tmr-motion-encoder"),
        FeatureSet(t_emb, "tmr-text-encoder"),
        per_text_sets=per_text, repetitions=reps, base_seed=args.seed)
    text_block = format_report(report, "hierarchical-pipeline",
                               "tmr-motion-encoder")
    (out / "evaluation.tsv").write_text(text_block)
    (out / "evaluation.json").write_text(json.dumps(report, indent=1))
    record_provenance(out, args)
    print(text_block, end="")
    print(f"report: {out / 'evaluation.tsv'}")
    return 0


def cmd_retrieval_eval(args) -> int:
    from .corpusio import split_items
    from .tmr import retrieval_eval
    items, skel = _load_corpus(args.corpus)
    split = split_items(items, args.split) or items
    tmr_model = _load_tmr(_require_checkpoint(args.tmr, "tmr"))
    out = resolve_out_dir(args)
    result = retrieval_eval(tmr_model, split, skel, args.protocol,
                            pool_seed=args.pool_seed)
    path = out / f"retrieval_{args.protocol}.json"
    path.write_text(json.dumps(result, indent=1))
    record_provenance(out, args)
    for direction in ("t2m", "m2t"):
        row = " ".join(f"R@{k}={v:.3f}" for k, v in result[direction].items())
        print(f"protocol {args.protocol} {direction}: {row}")
    print(f"report: {path}")
    return 0


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-vq": cmd_train_vq,
    "train-tmr": cmd_train_tmr,
    "train-gpt": cmd_train_gpt,
    "train-face": cmd_train_face,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "retrieval-eval": cmd_retrieval_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.device_threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.device_threads)
    try:
        return HANDLERS[args.command](args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surface module errors as clean CLI failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
