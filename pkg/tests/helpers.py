"""Small synthetic setups shared by the model, trainer and evaluator tests."""

import numpy as np

from protoforge import data
from protoforge.encoder import EncoderConfig
from protoforge.model import Model, ModelConfig


def small_data(n_train=8, n_test=6, n_instances=12, noise=0.0, seed=0, d_w=8, T=12):
    ds, vocab, table = data.make_synthetic(n_train + n_test, n_instances, 150, 3, noise, np.random.default_rng(seed),
                                           d_w=d_w, length=T - 2, cluster=0.8, topic_rank=4)
    tr, te = data.split_relations(ds, [n_train, n_test])
    return data.IndexedDataset(tr, vocab, T), data.IndexedDataset(te, vocab, T), vocab, table, (tr, te)


def small_model(table, n_positions, variant="apn-lw", dtype=np.float64, seed=0, T=12, d_h=16, **kw):
    enc = EncoderConfig(d_w=table.shape[1], d_p=3, d_h=d_h, T=T)
    cfg = ModelConfig(encoder=enc, variant=variant, n_positions=n_positions, seed=seed, **kw)
    return Model.create(cfg, table, dtype=dtype)
