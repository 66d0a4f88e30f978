"""
Gaussian mixture guider
One spatial 3D Gaussian mixture per light, fitted online with one-sample KL
steps and turned into emission densities through the directional transform
(point and rect lights) or the plane projection (directional lights).
"""

from typing import Dict, Optional

from services.config import InitializerMode
from services.emission import MixtureGuide
from services.error_handler import get_logger
from services.gmath import GaussianMixture
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiders.models import GuiderKind
from services.guiding_optimizer import (
    AdamState,
    EncodedMixture,
    clamp_to_encodable,
    decode,
    kl_step,
    lr_schedule,
    scale_factor,
)
from services.initializer import init_light_mixtures, naive_mixtures, random_mixture
from services.performance import rng_stream

logger = get_logger(__name__)

STREAM_INIT = 4


class GaussianGuider(BaseGuider):
    kind = GuiderKind.G3D

    def __init__(self, config):
        super().__init__(config)
        self.B: Optional[float] = None
        self.encoded: Dict[int, EncodedMixture] = {}
        self.adam: Dict[int, AdamState] = {}
        self._guides: Dict[int, MixtureGuide] = {}

    def initialize(self, context: RenderContext, init_result) -> None:
        scene, cfg = context.scene, self.config
        self.B = scale_factor(scene.diameter)
        rng = rng_stream(cfg.seed, 0, STREAM_INIT)
        lights = range(len(scene.lights))
        G = cfg.components

        mode = cfg.initializer
        if mode is InitializerMode.GEOMETRY and not scene.caster_ids:
            logger.warning("Scene has no casters; falling back to random initialization")
            mode = InitializerMode.OFF

        if mode is InitializerMode.GEOMETRY:
            mixtures = init_light_mixtures(
                scene, lights, cfg.k_per_geometry, G, cfg.init_photons, rng, cfg, init_result
            )
        elif mode is InitializerMode.NAIVE:
            mixtures = naive_mixtures(scene, init_result, G, self.B, rng, cfg.kmeans_iters)
        else:
            mixtures = {lid: random_mixture(scene, G, self.B, rng) for lid in lights}

        for lid, m in mixtures.items():
            self.set_mixture(lid, m)
        logger.info(f"G3D guider initialized ({mode.value}): {len(mixtures)} lights x {G} components")

    def set_mixture(self, light_id: int, mixture: GaussianMixture) -> None:
        self.encoded[light_id] = EncodedMixture.encode(clamp_to_encodable(mixture, self.B), self.B)
        self.adam[light_id] = AdamState(self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps)
        self._guides.pop(light_id, None)

    def mixture(self, light_id: int) -> Optional[GaussianMixture]:
        enc = self.encoded.get(light_id)
        return None if enc is None else decode(enc, self.B)

    def guide_for(self, light_id: int) -> Optional[MixtureGuide]:
        if light_id not in self.encoded:
            return None
        if light_id not in self._guides:
            self._guides[light_id] = MixtureGuide(self.mixture(light_id))
        return self._guides[light_id]

    def update(self, context: RenderContext, result) -> None:
        if not self.encoded:
            return
        total = max(self.config.iterations - 1, 1)
        lr = lr_schedule(min(max(result.iteration - 1, 0), total - 1), total)
        for lid, batch in result.training.items():
            if lid not in self.encoded or len(batch) == 0:
                continue
            if batch.gathered == 0:
                logger.debug(f"Light {lid}: no gathered photons this iteration")
            self.encoded[lid] = kl_step(self.encoded[lid], self.adam[lid], batch, lr, self.B)
            self._guides.pop(lid, None)

    def describe(self) -> dict:
        return {"kind": self.kind.value, "components": self.config.components, "scale": self.B}
