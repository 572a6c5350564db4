"""PID auto-tuning through PILCO policy distillation."""
