from .objective import (
    EvolutionConfig,
    aac_objective,
    clip_active,
    clipped_surrogate,
    eta_schedule,
    group_advantages,
    reward,
    rouge_l_f1,
)
from .policy import NonFiniteGradient, ReferencePolicy, RolloutGroup, UpdateReport, policy_update
