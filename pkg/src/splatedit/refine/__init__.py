from .muon import ORTH_SCHEDULE, MuonState, muon_step, newton_schulz_orth
from .session import (EditRecord, EditSession, EditView, base_digest,
                      decoded_scene, load_session, merge_local, new_session,
                      refine, reset_session, save_session)
from .ttt import (FAST_MODES, EditCrossAttnBlock, TTTBlock, TTTRefiner, adapt,
                  apply_streams, fast_apply)

__all__ = [
    "ORTH_SCHEDULE", "MuonState", "muon_step", "newton_schulz_orth",
    "FAST_MODES", "TTTBlock", "TTTRefiner", "EditCrossAttnBlock",
    "adapt", "apply_streams", "fast_apply",
    "EditView", "EditRecord", "EditSession", "new_session", "refine",
    "reset_session", "decoded_scene", "merge_local",
    "save_session", "load_session", "base_digest",
]
