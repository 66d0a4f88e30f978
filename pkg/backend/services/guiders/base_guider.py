"""
Base class for emission guiders
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional

import numpy as np

from services.config import GuiderKind, RenderConfig
from services.emission import EmissionBatch, EmissionGuide, emit_guided
from services.light_sampler import LightTree
from services.scene import Scene

if TYPE_CHECKING:
    from services.renderer import IterationResult


@dataclass
class RenderContext:
    scene: Scene
    config: RenderConfig
    light_sampler: LightTree
    max_radius: float


class BaseGuider(ABC):
    """Base class for all emission strategies; the renderer only talks to this interface"""

    kind: GuiderKind

    def __init__(self, config: RenderConfig):
        self.config = config

    def initialize(self, context: RenderContext, init_result: "IterationResult") -> None:
        """Called once with the discarded uniform first pass"""

    @abstractmethod
    def guide_for(self, light_id: int) -> Optional[EmissionGuide]:
        """
        Emission guide of a light

        Returns:
            None for plain uniform emission
        """

    def beta(self, iteration: int) -> float:
        return self.config.beta_at(iteration)

    def emit_photons(
        self, context: RenderContext, n: int, rng: np.random.Generator, iteration: int
    ) -> EmissionBatch:
        """Light selection by the light sampler, then per-light guided emission"""
        scene = context.scene
        light_id, pmf = context.light_sampler.sample_lights(rng.random(n))
        beta = self.beta(iteration)
        batches: List[EmissionBatch] = []
        for lid, light in enumerate(scene.lights):
            sel = np.flatnonzero(light_id == lid)
            if sel.size == 0:
                continue
            batch = emit_guided(light, self.guide_for(lid), beta, scene, rng, sel.size, light_id=lid)
            batch.pmf = pmf[sel]
            batches.append(batch)
        return EmissionBatch.concat(batches)

    def update(self, context: RenderContext, result: "IterationResult") -> None:
        """Learns from one finished iteration"""

    def describe(self) -> dict:
        return {"kind": self.kind.value}
