"""
USTD package: pre-trained spatio-temporal encoder with diffusion denoisers
for probabilistic forecasting and kriging on graphs.
"""
