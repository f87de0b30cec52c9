# config/catalog.py
"""
Per-domain defaults used when a run config leaves a value on `auto`
"""

# env id -> defaults. d_model is 64 for the small classic domains and car
# flag, 128 elsewhere. total_steps are read off the learning-curve axes.
ENV_CATALOG = {
    "heaven_hell": {"d_model": 64, "total_steps": 300_000, "step_cap": 40,
                    "summary": "T-shaped corridor; visit the priest to learn where heaven is"},
    "hallway": {"d_model": 64, "total_steps": 2_000_000, "step_cap": 100,
                "summary": "Noisy hallway navigation from the bundled .pomdp file"},
    "car_flag": {"d_model": 64, "total_steps": 500_000, "step_cap": 200,
                 "summary": "1D car; the oracle flag reveals which end is the goal"},
    "memory_cards": {"d_model": 128, "total_steps": 1_000_000, "step_cap": 50,
                     "summary": "Guess the partner of the revealed card"},
    "gv_memory": {"d_model": 128, "total_steps": 2_000_000, "step_cap": None,
                  "summary": "Gridverse-style memory; match the beacon colour to a flag"},
    "gv_memory_5x5": {"d_model": 128, "total_steps": 1_000_000, "step_cap": None, "grid_size": 5,
                      "summary": "gv_memory with N=5"},
    "gv_memory_7x7": {"d_model": 128, "total_steps": 2_000_000, "step_cap": None, "grid_size": 7,
                      "summary": "gv_memory with N=7"},
    "gv_memory_9x9": {"d_model": 128, "total_steps": 4_000_000, "step_cap": None, "grid_size": 9,
                      "summary": "gv_memory with N=9"},
    "pomdp": {"d_model": 64, "total_steps": 1_000_000, "step_cap": 100,
              "summary": "Any .pomdp file given by env.pomdp_file"},
}

# Ablation cells as config overrides on top of a domain config. Structure
# (combine step x LayerNorm placement) is crossed with positional encoding;
# the extra cells cover the last-position-only loss and the baselines.
STRUCTURE_CELLS = {
    "residual_post": [],
    "gate_post": ["model.combine_kind=gru_gate"],
    "residual_identity": ["model.norm_placement=identity_map"],
    "gate_identity": ["model.combine_kind=gru_gate", "model.norm_placement=identity_map"],
}
POS_CELLS = {
    "learned": [],
    "sinusoidal": ["model.pos_kind=sinusoidal"],
    "none": ["model.pos_kind=none"],
}

ABLATION_CELLS = {
    f"{structure}_pos_{pos}": structure_overrides + pos_overrides
    for structure, structure_overrides in STRUCTURE_CELLS.items()
    for pos, pos_overrides in POS_CELLS.items()
}
ABLATION_CELLS["no_intermediate_q"] = ["agent.intermediate_q=false"]
ABLATION_CELLS["dqn"] = ["model.kind=dqn_mlp"]
ABLATION_CELLS["attn"] = ["model.kind=attn"]

HALLWAY_FILE = "hallway.pomdp"
