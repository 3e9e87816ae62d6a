"""Forecasting emergency-department boarding with a hybrid CNN-LSTM, Shapley attribution and cross-period transfer."""

__version__ = "0.1.0"
