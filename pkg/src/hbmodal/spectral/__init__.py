"""FFT-domain modal identification (one well-separated mode per band)."""
from .data import (ModalDataset, SpectralModelParams, TimeHistoryDataset, load_modal_dataset,
                   load_time_history, save_modal_dataset, save_time_history)
from .identify import BandFit, fit_band, identify_modal_parameters
from .psd import FFTData, fft_of_response, neg_log_likelihood, theoretical_psd, transfer
from .simulate import simulate_modal_record, simulate_time_history

__all__ = [
    "BandFit", "FFTData", "ModalDataset", "SpectralModelParams", "TimeHistoryDataset",
    "fft_of_response", "fit_band", "identify_modal_parameters", "load_modal_dataset",
    "load_time_history", "neg_log_likelihood", "save_modal_dataset", "save_time_history",
    "simulate_modal_record", "simulate_time_history", "theoretical_psd", "transfer",
]
