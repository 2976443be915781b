"""Reference values for the sinusoidal decay threshold.

Evaluates clamp01(t_f * (1 - alpha * i / i_max) + beta * sin(omega * i)) at
50 significant digits with mpmath for t_f=0.95, alpha=0.5, beta=0.05,
omega=1.0, i_max=10000, i = 0..10000, and writes them rounded to 20
significant digits.

    python3 gen_sinusoidal_decay.py > sinusoidal_decay.csv
"""
import mpmath

mpmath.mp.dps = 50

T_F = mpmath.mpf("0.95")
ALPHA = mpmath.mpf("0.5")
BETA = mpmath.mpf("0.05")
OMEGA = mpmath.mpf("1.0")
I_MAX = 10000

print("i,threshold")
for i in range(I_MAX + 1):
    v = T_F * (1 - ALPHA * mpmath.mpf(i) / I_MAX) + BETA * mpmath.sin(OMEGA * i)
    v = min(max(v, mpmath.mpf(0)), mpmath.mpf(1))
    print(f"{i},{mpmath.nstr(v, 20, strip_zeros=False)}")
