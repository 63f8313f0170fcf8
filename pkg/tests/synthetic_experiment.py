"""Desk-scale synthetic experiment behind the generalization and protocol checks.

Trains FragNet-64 and WordImgNet on a 10-writer synthetic corpus (40 train
and 10 test words per writer, 5 words per page) for 15 epochs and evaluates
word, page and leave-one-out retrieval protocols on the test split.

A run takes well over an hour on one core, so results are cached as JSON
keyed by a digest of the package sources and this file. A stale cache is
never reused.

    python3 tests/synthetic_experiment.py      # run (or report) the experiment
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

from fragnet import checkpoint as ckpt_io
from fragnet import config, data, evaluate, optim

PKG_ROOT = Path(__file__).resolve().parents[1]
CACHE_DIR = Path(os.environ.get("FRAGNET_ACCEPTANCE_CACHE", PKG_ROOT / ".acceptance_cache"))
RESULT_FILE = "synthetic_experiment.json"

WRITERS, TRAIN_WORDS, TEST_WORDS, WORDS_PER_PAGE = 10, 40, 10, 5
EPOCHS, BATCH, SEED = 15, 10, 0


def source_digest() -> str:
    h = hashlib.sha256()
    files = sorted((PKG_ROOT / "src" / "fragnet").glob("*.py")) + [Path(__file__).resolve()]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def run_network(cfg, train_set, test_set, out: Path) -> dict:
    # first 15 epochs of the 30-epoch schedule: 1e-4 for 0-9, 5e-5 for 10-14
    plan = optim.TrainPlan(total_epochs=EPOCHS, batch_size=BATCH, seed=SEED)
    t0 = time.perf_counter()
    with open(out / f"{cfg.label}.log", "w", encoding="utf-8") as fh:
        res = optim.train(cfg, plan, train_set.images, train_set.labels, log_file=fh)
    train_s = time.perf_counter() - t0
    ckpt_io.save_checkpoint(out / f"{cfg.label}.ckpt",
                            ckpt_io.Checkpoint(cfg, res.params, res.state, EPOCHS - 1, res.state.t, SEED))
    t0 = time.perf_counter()
    probs, _ = evaluate.predict(res.params, cfg, test_set.images)
    word = evaluate.identify_words(probs, test_set.labels)
    page = evaluate.identify_pages(probs, test_set.labels, test_set.page_ids)
    retrieval = evaluate.retrieval_eval(probs, test_set.labels)
    eval_s = time.perf_counter() - t0
    first_loss = float(res.log_lines[0].split()[2])
    return {
        "label": cfg.label,
        "word_top1": word.top1, "word_top5": word.top5, "words": word.n,
        "page_top1": page.top1, "page_top5": page.top5, "pages": page.n,
        "retrieval_top1": retrieval.top1, "retrieval_mAP": retrieval.mAP, "retrieval_skipped": retrieval.skipped,
        "epoch_losses": res.epoch_losses, "first_step_loss": first_loss, "steps": res.state.t,
        "train_seconds": train_s, "eval_seconds": eval_s,
    }


def run_experiment() -> dict:
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    root = CACHE_DIR / "corpus"
    data.generate_synthetic(root, WRITERS, TRAIN_WORDS, TEST_WORDS, SEED, WORDS_PER_PAGE)
    train_m, test_m = data.load_split(root / "train.tsv", root / "test.tsv")
    train_set, test_set = data.load_wordset(train_m), data.load_wordset(test_m)
    nets = {}
    for cfg in (config.fragnet(64, WRITERS), config.wordimgnet(WRITERS)):
        nets[cfg.label] = run_network(cfg, train_set, test_set, CACHE_DIR)
        print(json.dumps(nets[cfg.label]), flush=True)
    result = {
        "digest": source_digest(),
        "cpu_count": os.cpu_count(),
        "total_seconds": time.perf_counter() - started,
        "train_words": len(train_set), "test_words": len(test_set),
        "networks": nets,
    }
    (CACHE_DIR / RESULT_FILE).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result


def cached_result() -> dict | None:
    path = CACHE_DIR / RESULT_FILE
    if not path.exists():
        return None
    result = json.loads(path.read_text(encoding="utf-8"))
    return result if result.get("digest") == source_digest() else None


def load_or_run() -> dict:
    return cached_result() or run_experiment()


if __name__ == "__main__":
    res = load_or_run()
    json.dump(res, sys.stdout, indent=2)
    print()
    # quick summary, mostly for the log
    for net in res["networks"].values():
        print(f"{net['label']}: word {net['word_top1']:.1f} page {net['page_top1']:.1f} "
              f"mAP {net['retrieval_mAP']:.4f} train {net['train_seconds'] / 60:.1f} min")
    print(f"total {res['total_seconds'] / 60:.1f} min on {res['cpu_count']} cpu(s)")
