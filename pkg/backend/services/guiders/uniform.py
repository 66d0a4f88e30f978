"""
Uniform emission (classical photon mapping)
"""

from services.guiders.base_guider import BaseGuider
from services.guiders.models import GuiderKind


class UniformGuider(BaseGuider):
    kind = GuiderKind.UNIFORM

    def guide_for(self, light_id: int):
        return None

    def beta(self, iteration: int) -> float:
        return 0.0
