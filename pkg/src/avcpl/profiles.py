"""Named configuration bundles.

``desk`` is the small profile used for the end-to-end checks: a two-layer,
64-wide encoder and lighter masking (one narrow frequency mask, one time
mask), which converges within a couple of thousand CPU updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .cpl import CplConfig, TrainConfig
from .data import AugmentConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig, ModalityDropoutConfig


@dataclass
class Profile:
    encoder: EncoderConfig
    augment: AugmentConfig
    seed_train: TrainConfig
    cpl_train: TrainConfig
    seed_dropout: ModalityDropoutConfig
    cpl: CplConfig
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(beam_size=64, lm_weight=2.0))


def desk(seed: int = 0) -> Profile:
    aug = AugmentConfig(n_freq_masks=1, freq_param=10, n_time_masks=1)
    return Profile(
        encoder=EncoderConfig(model_dim=64, n_layers=2, n_heads=4, ffn_dim=256),
        augment=aug,
        seed_train=TrainConfig(steps=1500, augment=aug, seed=seed),
        cpl_train=TrainConfig(steps=0, warmup_steps=50, hold_until=10 ** 9, augment=aug, seed=seed),
        seed_dropout=ModalityDropoutConfig(0.5, 0.5),
        cpl=CplConfig(algorithm="ema", warmup=200, p_m=0.1, alpha=0.999, cache_p=0.1,
                      cache_size=100, steps=2400),
    )
