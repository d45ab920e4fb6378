from .batch import BatchResult, sample_seeds, simulate_batch
from .model import (
    NetworkParams,
    SLIFSystem,
    build_slif_network,
    feedforward_mask,
    initial_clocks,
    initial_state,
    intensity,
    intensity_grad,
    layer_slices,
)
from .simulate import min_gap, run_network, simulate_spike_trains, solution_trains
from .io import read_spike_csv, write_spike_csv
from .online import OnlineResult, eligibility_traces, expm_gamma, gamma_matrix, online_sensitivity
