"""Scratch experiment: criterion-6-shaped toy training, timing + convergence."""
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from soundext.bank import build_event_bank, build_noise_bank, default_bank_spec
from soundext.checkpoint import init_checkpoint
from soundext.evaluation import EmbeddingPolicy, evaluate
from soundext.model import ModelConfig
from soundext.scenes import GeneratorConfig, SceneStore, generate_dataset
from soundext.training import TrainingConfig, train

CACHE = Path("/root/cache_exp")
N_TRAIN, N_DEV, N_TEST = 600, 60, 100
LR = float(sys.argv[1]) if len(sys.argv) > 1 else 5e-4
CROP = float(sys.argv[2]) if len(sys.argv) > 2 else 1.5
MAX_EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 14

spec = default_bank_spec(clips_per_class=12, seed=606)
bank = build_event_bank(spec)
noise = build_noise_bank(spec)

t0 = time.time()
if not (CACHE / "train" / "manifest.jsonl").exists():
    gen = lambda ms: GeneratorConfig(n_events=2, master_seed=ms)
    generate_dataset(bank, noise, gen(1), N_TRAIN, "train", CACHE)
    generate_dataset(bank, noise, gen(2), N_DEV, "dev", CACHE)
    generate_dataset(bank, noise, gen(3), N_TEST, "test", CACHE)
    print(f"dataset rendered in {time.time()-t0:.0f}s", flush=True)

train_store = SceneStore(CACHE / "train", cache=True)
dev_store = SceneStore(CACHE / "dev", cache=True)
test_store = SceneStore(CACHE / "test", cache=True)

toy = ModelConfig(enc_filters=64, bottleneck=64, conv_channels=128,
                  blocks_per_repeat=4, repeats=2, embed_dim=64)
ckpt0 = init_checkpoint(toy, bank.labels, seed=0)
cfg = TrainingConfig(mode="mixed_el", alpha=3.0, lr=LR, max_epochs=MAX_EPOCHS,
                     batch_size=8, seed=0, crop_s=CROP)

probe_store = SceneStore(CACHE / "test")
probe_store.manifests = probe_store.manifests[:30]

def sdri_of(ckpt, store, policy, model=None):
    records, errs = evaluate(ckpt, store, policy, bank, model=model)
    assert not errs
    return float(np.mean([r.sdri_db for r in records]))

history = []

def callback(model, epoch, train_row, dev_row):
    t = time.time() - t_start
    line = f"epoch {epoch}: train {train_row['total']:.2f} dev {dev_row['total']:.2f} ({t:.0f}s)"
    if epoch % 2 == 1:
        from soundext.checkpoint import Checkpoint
        snap = Checkpoint.from_model(model, ckpt0.vocab, metadata={"mode": "mixed_el"})
        s1 = sdri_of(snap, probe_store, EmbeddingPolicy(source="one_hot"), model=model)
        s2 = sdri_of(snap, probe_store, EmbeddingPolicy(source="enrollment", k=1, seed=5), model=model)
        line += f"  probe SDRi 1hot {s1:.2f} enrl {s2:.2f}"
        history.append((epoch, s1, s2))
        print(line, flush=True)
        return s1 >= 5.5 and s2 >= 5.5
    print(line, flush=True)
    return False

t_start = time.time()
best = train(train_store, dev_store, bank, ckpt0, cfg, "/root/cache_exp/run", epoch_callback=callback)
print(f"training done in {(time.time()-t_start)/60:.1f} min", flush=True)

for policy, tag in ((EmbeddingPolicy(source="one_hot"), "one_hot"),
                    (EmbeddingPolicy(source="enrollment", k=1, seed=9), "enrollment")):
    t1 = time.time()
    val = sdri_of(best, test_store, policy)
    print(f"final test SDRi [{tag}]: {val:.2f} dB  (eval {time.time()-t1:.0f}s)", flush=True)
