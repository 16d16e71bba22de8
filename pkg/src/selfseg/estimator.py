"""scikit-learn style estimators wrapping the segmentation pipeline."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import datapipe, optim, unet
from .config import MODES
from .nn import ShapeError
from .selflabel import ClassSet, normalize_channels
from .slic import slic_segment
from .validation import check_fixed_masks, check_images, check_superpixel_maps


class SliceStandardizer(TransformerMixin, BaseEstimator):
    """Zero pixels below ``clip_threshold`` then standardize each slice on its own."""

    def __init__(self, clip_threshold=None):
        self.clip_threshold = clip_threshold

    def fit(self, X, y=None):
        X = check_images(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        X = check_images(X)
        out = np.empty_like(X)
        for i, img in enumerate(X):
            if self.clip_threshold is not None:
                img = datapipe.clip_porous(img, self.clip_threshold)
            out[i] = datapipe.standardize_slice(img)[0]
        return out


class SuperpixelTransformer(TransformerMixin, BaseEstimator):
    """Map each image to its SLIC superpixel id image."""

    def __init__(self, n_segments=16, compactness=0.1, iters=10):
        self.n_segments = n_segments
        self.compactness = compactness
        self.iters = iters

    def fit(self, X, y=None):
        check_images(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        X = check_images(X)
        return np.stack([slic_segment(img, self.n_segments, self.compactness, self.iters).ids
                         for img in X])


class SelfAnnotatingSegmenter(BaseEstimator):
    """U-Net trained on dynamic labels from its own superpixel-refined argmax.

    ``fit`` takes standardized training tiles ``(n, h, w)``. Modes ``US3``
    and ``US4`` are unsupervised with 3 or 4 output channels; ``SS3``
    additionally needs ``fixed`` masks whose non-negative entries (the
    porosity class, channel 2) override the self-generated labels.

    After fitting, ``params_`` holds the parameters of the epoch with the
    lowest mean validation loss (``best_epoch_``), ``loss_curve_`` the
    per-epoch history and ``state_`` the final optimizer state.
    """

    def __init__(self, mode="SS3", depth=4, base_features=64, dropout=0.5,
                 dropout_rescale=True, lr=5e-4, lr_min=1e-4, momentum=0.5,
                 batch_size=24, max_epochs=100, restart_epochs=10, restart_mult=2,
                 reset_velocity_on_restart=False, validation_split=(2, 1),
                 n_segments=16, compactness=0.1, slic_iters=10, tile_size=None,
                 overlap=32, dtype="float64", random_state=0, checkpoint_dir=None,
                 verbose=False):
        self.mode = mode
        self.depth = depth
        self.base_features = base_features
        self.dropout = dropout
        self.dropout_rescale = dropout_rescale
        self.lr = lr
        self.lr_min = lr_min
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.restart_epochs = restart_epochs
        self.restart_mult = restart_mult
        self.reset_velocity_on_restart = reset_velocity_on_restart
        self.validation_split = validation_split
        self.n_segments = n_segments
        self.compactness = compactness
        self.slic_iters = slic_iters
        self.tile_size = tile_size
        self.overlap = overlap
        self.dtype = dtype
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.verbose = verbose

    # -- configuration helpers ---------------------------------------------

    def _unet_config(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        return unet.UNetConfig(depth=self.depth, base_features=self.base_features,
                               out_channels=MODES[self.mode], dropout_p=self.dropout,
                               dropout_rescale=self.dropout_rescale)

    def _train_config(self, seed):
        return optim.TrainConfig(
            lr0=self.lr, lr_min=self.lr_min, momentum=self.momentum,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            restart0_epochs=self.restart_epochs, restart_mult=self.restart_mult,
            seed=seed, reset_velocity_on_restart=self.reset_velocity_on_restart)

    def _seed(self):
        rs = self.random_state
        if rs is None:
            return int(np.random.SeedSequence().entropy % (2 ** 32))
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        raise ValueError("random_state must be an int or None")

    def _label_spec(self):
        return optim.LabelSpec("SS" if self.mode.startswith("SS") else "US")

    def _pool(self, X, fixed, maps, name):
        n_classes = MODES[self.mode]
        fixed = check_fixed_masks(fixed, X.shape, n_classes, name=f"fixed{name}")
        if self.mode.startswith("SS") and fixed is None:
            raise ValueError(f"mode {self.mode} needs fixed-label masks (fixed{name}=...)")
        maps = check_superpixel_maps(maps, len(X), X.shape[1:], name=f"superpixels{name}")
        if maps is None:
            maps = [slic_segment(img, self.n_segments, self.compactness, self.slic_iters)
                    for img in X]
        return datapipe.TilePool(X, maps, fixed)

    # -- fitting -------------------------------------------------------------

    def fit(self, X, y=None, *, fixed=None, superpixels=None, X_val=None, fixed_val=None,
            superpixels_val=None, resume=False, on_labels=None):
        """Train on tiles ``X``; ``y`` is ignored (labels are self-generated).

        Without ``X_val`` the tiles are split by ``validation_split`` into
        disjoint training and validation pools. With ``resume`` and a
        ``checkpoint_dir`` holding a previous run's checkpoints, training
        continues from the last completed epoch.
        """
        cfg = self._unet_config()
        self.seed_ = self._seed()
        dtype = np.dtype(self.dtype)
        X = check_images(X).astype(dtype, copy=False)
        ok, why = unet.check_compat(cfg, *X.shape[1:])
        if not ok:
            raise ShapeError(why)
        pool = self._pool(X, fixed, superpixels, "")
        if X_val is not None:
            Xv = check_images(X_val, "X_val").astype(dtype, copy=False)
            train_pool, val_pool = pool, self._pool(Xv, fixed_val, superpixels_val, "_val")
        else:
            n_train, _ = datapipe.split_counts(len(pool), self.validation_split)
            order = np.random.default_rng(self.seed_).permutation(len(pool))
            train_pool = pool.subset(sorted(order[:n_train]))
            val_pool = pool.subset(sorted(order[n_train:])) if n_train < len(pool) else None
        return self._fit_pools(train_pool, val_pool, resume=resume, on_labels=on_labels)

    def _fit_pools(self, train_pool, val_pool, resume=False, on_labels=None):
        cfg = self._unet_config()
        tcfg = self._train_config(self.seed_)
        ckpt = Path(self.checkpoint_dir) if self.checkpoint_dir is not None else None
        state, best = None, None
        if resume and ckpt is not None and (ckpt / "last.ckpt").exists():
            params, meta, extra = unet.load_checkpoint(ckpt / "last.ckpt")
            if params.config != cfg:
                raise ValueError("checkpoint was written for a different network configuration")
            state = optim.TrainState.from_meta(meta["train_state"], extra.get("velocity"))
            if (ckpt / "best.ckpt").exists():
                best = unet.load_checkpoint(ckpt / "best.ckpt")[0]
        else:
            params = unet.build(cfg, seed=tcfg.seed, dtype=np.dtype(self.dtype))
        log = print if self.verbose else None

        saved_best = {"epoch": state.best_epoch if state else -1}

        def on_epoch_end(st, current, best_params):
            if ckpt is None:
                return
            ckpt.mkdir(parents=True, exist_ok=True)
            if st.best_epoch != saved_best["epoch"]:
                unet.save_checkpoint(ckpt / "best.ckpt", best_params,
                                     meta={"epoch": st.best_epoch, "seed": tcfg.seed})
                saved_best["epoch"] = st.best_epoch
            unet.save_checkpoint(ckpt / "last.ckpt", current,
                                 meta={"train_state": st.meta(), "seed": tcfg.seed},
                                 extra_arrays={"velocity": st.velocities})
            optim.write_loss_csv(ckpt / "loss.csv", st.history)

        state, best_params = optim.train(params, train_pool, val_pool, tcfg, self._label_spec(),
                                         state=state, on_epoch_end=on_epoch_end,
                                         on_labels=on_labels, log=log, best=best)
        self.params_ = best_params
        self.last_params_ = params
        self.state_ = state
        self.best_epoch_ = state.best_epoch
        self.loss_curve_ = list(state.history)
        self.classes_ = ClassSet.for_mode(self.mode).names
        self.n_channels_ = cfg.out_channels
        self.n_features_in_ = 1
        return self

    # -- inference ------------------------------------------------------------

    def decision_function(self, X):
        """Raw network scores ``(n, h, w, channels)`` in infer mode.

        With ``tile_size`` set, larger images are covered by overlapping
        tiles whose scores are averaged.
        """
        check_is_fitted(self, "params_")
        X = check_images(X)
        p = self.params_
        if self.tile_size is not None and X.shape[1:] != (self.tile_size, self.tile_size):
            return np.stack([datapipe.predict_slice(p, img, self.tile_size, self.overlap,
                                                    self.batch_size) for img in X])
        ok, why = unet.check_compat(p.config, *X.shape[1:])
        if not ok:
            raise ShapeError(why)
        out = []
        for start in range(0, len(X), self.batch_size):
            xb = X[start:start + self.batch_size, ..., None].astype(p.dtype)
            out.append(unet.forward(p, xb, mode="infer").astype(np.float64))
        return np.concatenate(out)

    def transform(self, X):
        """Per-image, per-channel standardized scores."""
        return normalize_channels(self.decision_function(X))

    def predict(self, X):
        """Per-pixel channel index of the highest standardized score."""
        return np.argmax(self.transform(X), axis=-1)
