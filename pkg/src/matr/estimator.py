"""scikit-learn style estimator wrapping the network, training and inference."""
from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import AdamW
from .checkpoint import load_checkpoint, save_checkpoint
from .datakit import ClipTooShort, FeatureSequence, pretrain_samples, timestamps_to_labels
from .decoding import Prediction, decode_segments, nms_1d, select_top1
from .metrics import evaluate
from .model import Batch, MATRNetwork, ModelConfig
from .objectives import LossWeights, overall_loss
from .validation import check_moments, check_pairs, check_videos

_STAGE_CODES = {"pretrain": 1, "train": 2}


class MomentRetriever(BaseEstimator):
    """Locate the moment of a target video that matches a query video.

    ``X`` is a sequence of ``(target, query)`` pairs of per-frame feature
    matrices and ``y`` the ``(start_sec, end_sec)`` moment for each pair.
    :meth:`predict` returns one ``(start_sec, end_sec, score)`` row per pair.

    Set ``warm_start=True`` to fine-tune from the current weights (for
    instance after :meth:`pretrain`) instead of re-initialising.

    ``align_warmup_epochs`` switches both alignment losses off for the first
    pre-training epochs. Soft-DTW only ever pulls matched frames together, and
    before the network can tell the moment from the background that pull is
    spread over the whole target, which collapses the features.
    """

    def __init__(self, d=64, k=2, n_queries=10, heads=4, ffn_mult=4,
                 dropout_transformer=0.1, dropout_projection=0.5, gamma=0.1,
                 alignment_mode="subsequence", lambda_fg=1.0, lambda_seg=1.0,
                 lambda_align_pre=1.0, lambda_align_post=1.0, lambda_l1=1.0, lambda_iou=1.0,
                 learning_rate=1e-4, weight_decay=1e-4, epochs=200, batch_size=32,
                 pretrain_epochs=20, augment=True, align_warmup_epochs=0, frame_period_sec=2.0,
                 nms_threshold=0.7, random_state=0, warm_start=False, verbose=0):
        self.d = d
        self.k = k
        self.n_queries = n_queries
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.dropout_transformer = dropout_transformer
        self.dropout_projection = dropout_projection
        self.gamma = gamma
        self.alignment_mode = alignment_mode
        self.lambda_fg = lambda_fg
        self.lambda_seg = lambda_seg
        self.lambda_align_pre = lambda_align_pre
        self.lambda_align_post = lambda_align_post
        self.lambda_l1 = lambda_l1
        self.lambda_iou = lambda_iou
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.augment = augment
        self.align_warmup_epochs = align_warmup_epochs
        self.frame_period_sec = frame_period_sec
        self.nms_threshold = nms_threshold
        self.random_state = random_state
        self.warm_start = warm_start
        self.verbose = verbose

    # ---------------------------------------------------------------- setup
    def model_config(self, input_dim):
        return ModelConfig(
            input_dim=input_dim, d=self.d, k=self.k, n_queries=self.n_queries, heads=self.heads,
            ffn_mult=self.ffn_mult, dropout_transformer=self.dropout_transformer,
            dropout_projection=self.dropout_projection, gamma=self.gamma,
            alignment_mode=self.alignment_mode)

    def loss_weights(self):
        return LossWeights(self.lambda_fg, self.lambda_seg, self.lambda_align_pre,
                           self.lambda_align_post, self.lambda_l1, self.lambda_iou)

    def _init(self, input_dim, force=False):
        if not force and getattr(self, "network_", None) is not None:
            if self.network_.config.input_dim != input_dim:
                raise ValueError(f"model expects {self.network_.config.input_dim} features, got {input_dim}")
            return
        self.network_ = MATRNetwork(self.model_config(input_dim), seed=self.random_state)
        self.optimizer_ = AdamW(self.network_.params, lr=self.learning_rate,
                                weight_decay=self.weight_decay)
        self.n_features_in_ = input_dim
        self.history_ = []

    def _check_fitted(self):
        if getattr(self, "network_", None) is None:
            raise NotFittedError("MomentRetriever is not fitted yet; call fit or load a checkpoint")

    # ---------------------------------------------------------------- training
    def _run_epochs(self, examples, epochs, stage, log=None):
        """``examples`` holds (target, query, MomentLabels); one AdamW step per batch."""
        net, opt = self.network_, self.optimizer_
        opt.lr, opt.weight_decay = self.learning_rate, self.weight_decay
        full = self.loss_weights()
        quiet = LossWeights(full.fg, full.seg, 0.0, 0.0, full.l1, full.iou)
        code = _STAGE_CODES[stage]
        start_epoch = self.epochs_done(stage)
        t0 = time.perf_counter()
        for epoch in range(start_epoch, start_epoch + epochs):
            warm = stage == "pretrain" and epoch < self.align_warmup_epochs
            weights = quiet if warm else full
            ex = examples(epoch) if callable(examples) else examples
            order = np.random.default_rng([self.random_state, code, epoch]).permutation(len(ex))
            n_batches = max(1, int(np.ceil(len(ex) / self.batch_size)))
            for bi in range(n_batches):
                idx = order[bi * self.batch_size:(bi + 1) * self.batch_size]
                chunk = [ex[i] for i in idx]
                batch = Batch.from_pairs([(t, q) for t, q, _ in chunk])
                rng = np.random.default_rng([self.random_state, code, epoch, bi])
                out = net.forward(batch, training=True, rng=rng)
                loss, comps = overall_loss(out, [lab for _, _, lab in chunk], weights,
                                           return_components=True)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"{stage}: non-finite loss at epoch {epoch}, batch {bi}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                rec = {"stage": stage, "step": opt.step_count, "epoch": epoch, "loss": loss.item(),
                       **comps, "wall_time": round(time.perf_counter() - t0, 4),
                       "end_of_epoch": bi == n_batches - 1}
                self.history_.append(rec)
                if log is not None:
                    log(rec)
            if self.verbose:
                last = [h["loss"] for h in self.history_[-n_batches:]]
                print(f"[{stage}] epoch {epoch + 1}: loss {np.mean(last):.4f}")
        return self

    def epochs_done(self, stage):
        """Completed epochs of ``stage`` ("pretrain" or "train")."""
        return sum(1 for h in getattr(self, "history_", []) if h.get("stage") == stage and h.get("end_of_epoch"))

    def fit(self, X, y, log=None):
        """Supervised training on moments ``y`` (seconds)."""
        pairs = check_pairs(X)
        y = check_moments(y, len(pairs))
        self._init(pairs[0][0].shape[1], force=not self.warm_start)
        period = self.frame_period_sec
        examples = [(t, q, timestamps_to_labels(m, len(t), period)) for (t, q), m in zip(pairs, y)]
        return self._run_epochs(examples, self.epochs, "train", log)

    def pretrain(self, videos, epochs=None, log=None):
        """Self-supervised clip localisation on unlabeled videos.

        Each epoch draws a fresh clip per video; with ``augment`` the clip is
        also used once more under a random augmentation.
        """
        feats = check_videos(videos)
        self._init(feats[0].shape[1], force=False)
        seqs = [FeatureSequence(f"v{i}", f, self.frame_period_sec) for i, f in enumerate(feats)]
        n_skipped = []

        def examples(epoch):
            samples, skipped = pretrain_samples(seqs, self.random_state, epoch, self.augment)
            n_skipped.append(skipped)
            if not samples:
                raise ClipTooShort("no video long enough for pre-training")
            return [(s.target.features, s.query.features, s.labels) for s in samples]

        self._run_epochs(examples, self.pretrain_epochs if epochs is None else epochs, "pretrain", log)
        self.pretrain_skipped_ = int(n_skipped[-1]) if n_skipped else 0
        return self

    # ---------------------------------------------------------------- inference
    def forward_pairs(self, X, batch_size=None):
        """Eval-mode network outputs, one ``Prediction`` per pair."""
        self._check_fitted()
        pairs = check_pairs(X, self.n_features_in_)
        bs = batch_size or self.batch_size
        preds = []
        for i in range(0, len(pairs), bs):
            out = self.network_.forward(Batch.from_pairs(pairs[i:i + bs]), training=False)
            for b in range(out.fg_probs.shape[0]):
                m = int(out.target_len[b])
                preds.append(Prediction(out.fg_probs.data[b, :m], out.offsets.data[b, :m]))
        return preds

    def predict_candidates(self, X):
        """Post-NMS candidate segments per pair, best first."""
        return [nms_1d(decode_segments(p, self.frame_period_sec), self.nms_threshold)
                for p in self.forward_pairs(X)]

    def predict(self, X):
        return np.array([tuple(select_top1(c)) for c in self.predict_candidates(X)])

    def score(self, X, y):
        """Mean temporal IoU of the top-1 predictions."""
        return self.evaluate(X, y).miou

    def evaluate(self, X, y, ids=None):
        y = check_moments(y, len(X))
        pred = self.predict(X)
        ids = ids or [(str(i), "") for i in range(len(pred))]
        return evaluate({k: tuple(p[:2]) for k, p in zip(ids, pred)},
                        {k: tuple(m) for k, m in zip(ids, y)})

    # ---------------------------------------------------------------- persistence
    def save(self, path, meta=None):
        self._check_fitted()
        arrays = {f"param/{k}": v for k, v in self.network_.state_dict().items()}
        arrays.update(self.optimizer_.state_arrays())
        config = {"model": self.network_.config.to_dict(), "estimator": self.get_params()}
        info = {"step": self.optimizer_.step_count,
                "epochs_done": {s: self.epochs_done(s) for s in _STAGE_CODES}}
        info.update(meta or {})
        save_checkpoint(path, arrays, config, info)

    def load(self, path, expect_config=None):
        """Restore weights and optimizer state saved by :meth:`save`.

        ``expect_config`` (a ModelConfig) triggers a mismatch error before any
        weights are touched.
        """
        arrays, config, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(config["model"])
        if expect_config is not None and cfg != expect_config:
            raise ValueError(f"checkpoint model config {cfg} does not match requested {expect_config}")
        self.network_ = MATRNetwork(cfg, seed=self.random_state)
        self.network_.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        self.optimizer_ = AdamW(self.network_.params, lr=self.learning_rate, weight_decay=self.weight_decay)
        self.optimizer_.load_state_arrays(arrays, meta.get("step", 0))
        self.n_features_in_ = cfg.input_dim
        self.history_ = []
        for stage, n in meta.get("epochs_done", {}).items():
            self.history_ += [{"stage": stage, "end_of_epoch": True}] * int(n)
        return self
