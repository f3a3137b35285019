"""Small shared builders for the test suite."""
import numpy as np

from xae.models import ModelSpec

FUSIONS = ("CONCAT", "SCORED", "MDATT", "GENATT")


def toy_spec(variant: str, fusion: str) -> ModelSpec:
    """A few hundred parameters; cheap enough for full finite-difference sweeps."""
    if variant == "IAE":
        return ModelSpec(variant="IAE", fusion=fusion, conv_channels=(2, 2, 2, 3), hid1=4, out1=5, hid2=4,
                         out2=5 if fusion == "SCORED" else 4, hid3=4, out3=3, d_inner=3, att_dq=3, att_dk=3,
                         att_dv=4, dropout=0.0)
    return ModelSpec(variant="XAE", fusion=fusion, embed_dim=6, depth=1, heads=2, mlp_ratio=1.0, d_face=5, hid2=4,
                     out2=4 if fusion == "CONCAT" else 5, d_inner=3, att_dq=3, att_dk=3, att_dv=4, query_dim=3,
                     key_dim=3, gru_hidden=3, value_dim=4)


def toy_inputs(batch: int = 2, k: int = 2, seed: int = 1):
    rng = np.random.default_rng(seed)
    return rng.random((batch, k, 50, 50, 3)), rng.standard_normal((batch, k, 54))
