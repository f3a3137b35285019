"""Explainable addressee estimation on a small numpy autodiff engine."""
from .data import SynthConfig, UtteranceSequence, load_dataset, save_dataset, synth_generate
from .estimator import AddresseeEstimator
from .explain import (ExplanationBundle, ModalityWeights, SaliencyMap, TimeScores, VerbalCue,
                      expressiveness_sweep, modality_stats, saliency_from_attention, trigger_probability,
                      verbal_cue)
from .models import AddresseeLabel, AddresseeNet, ModelSpec
from .nn import param_count
from .sim import SpatialMemory, resolve_addressee, run_episode
from .training import RunConfig, confusion, cross_validate, weighted_f1

__version__ = "0.1.0"

__all__ = [
    "AddresseeEstimator", "AddresseeLabel", "AddresseeNet", "ExplanationBundle", "ModalityWeights", "ModelSpec",
    "RunConfig", "SaliencyMap", "SpatialMemory", "SynthConfig", "TimeScores", "UtteranceSequence", "VerbalCue",
    "confusion", "cross_validate", "expressiveness_sweep", "load_dataset", "modality_stats", "param_count",
    "resolve_addressee", "run_episode", "saliency_from_attention", "save_dataset", "synth_generate",
    "trigger_probability", "verbal_cue", "weighted_f1",
]
