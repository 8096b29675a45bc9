#!/usr/bin/env python3
"""Regenerate the spectral data tables shipped in src/spectraface/data/.

Deterministic: running this twice produces byte-identical CSVs. Sources:

* cie_a.csv           -- CIE standard illuminant A from its defining Planckian
                         formula (CIE 15:2004): T = 2848 K with c2 = 1.435e7 nm K,
                         normalised to 100 at 560 nm.
* cie_d_components.csv -- daylight basis functions S0, S1, S2 (CIE 15:2004 Table T.2).
* cmf_1931.csv        -- CIE 1931 2-degree standard observer at 10 nm.
* cie_f.csv           -- twelve fluorescent SPDs modelled after the three CIE F
                         families (halophosphate F1-F6, broadband F7-F9,
                         tri-band F10-F12): mercury emission lines plus phosphor
                         bands. These are physically plausible stand-ins, not
                         the official tables.
* camera_sensitivities.csv -- synthetic ensemble of 28 RGB camera sensitivity
                         curves on 400-720 nm, generated from a low-dimensional
                         family (spectral shift + bandwidth modes) with small
                         smooth perturbations, mimicking the statistics of
                         measured-camera collections.
* hemoglobin.csv      -- molar extinction of oxy-/deoxy-haemoglobin (cm^-1/M),
                         compiled from standard tabulations (Prahl's OMLC
                         collection); values rounded, minor bands smoothed.
"""

import argparse
from pathlib import Path

import numpy as np

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "spectraface" / "data"


def write_csv(path: Path, comment: str, header: list[str], rows: np.ndarray, fmt="%.6f"):
    lines = [f"# {line}" for line in comment.strip().splitlines()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(fmt % v if i else "%g" % v for i, v in enumerate(row)))
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({rows.shape[0]} rows x {rows.shape[1]} cols)")


def illuminant_a(out: Path):
    lam = np.arange(380.0, 781.0, 5.0)
    # Defining equation of illuminant A (Planck at 2848 K, c2 = 1.435e7 nm K).
    c2 = 1.435e7
    t = 2848.0
    num = np.expm1(c2 / (t * 560.0))
    val = 100.0 * (560.0 / lam) ** 5 * num / np.expm1(c2 / (t * lam))
    write_csv(
        out / "cie_a.csv",
        "CIE standard illuminant A, relative SPD (100 at 560 nm).\n"
        "Computed from the defining Planckian formula of CIE 15:2004.",
        ["wavelength", "value"],
        np.column_stack([lam, val]),
    )


# CIE daylight components S0, S1, S2 (CIE 15:2004 Table T.2), 10 nm, 380-780 nm.
DAYLIGHT_COMPONENTS = """
380 63.40 38.50 3.00
390 65.80 35.00 1.20
400 94.80 43.40 -1.10
410 104.80 46.30 -0.50
420 105.90 43.90 -0.70
430 96.80 37.10 -1.20
440 113.90 36.70 -2.60
450 125.60 35.90 -2.90
460 125.50 32.60 -2.80
470 121.30 27.90 -2.60
480 121.30 24.30 -2.60
490 113.50 20.10 -1.80
500 113.10 16.20 -1.50
510 110.80 13.20 -1.30
520 106.50 8.60 -1.20
530 108.80 6.10 -1.00
540 105.30 4.20 -0.50
550 104.40 1.90 -0.30
560 100.00 0.00 0.00
570 96.00 -1.60 0.20
580 95.10 -3.50 0.50
590 89.10 -3.50 2.10
600 90.50 -5.80 3.20
610 90.30 -7.20 4.10
620 88.40 -8.60 4.70
630 84.00 -9.50 5.10
640 85.10 -10.90 6.70
650 81.90 -10.70 7.30
660 82.60 -12.00 8.60
670 84.90 -14.00 9.80
680 81.30 -13.60 10.20
690 71.90 -12.00 8.30
700 74.30 -13.30 9.60
710 76.40 -12.90 8.50
720 63.30 -10.60 7.00
730 71.70 -11.60 7.60
740 77.00 -12.20 8.00
750 65.20 -10.20 6.70
760 47.70 -7.80 5.20
770 68.60 -11.20 7.40
780 65.00 -10.40 6.80
"""

# CIE 1931 2-degree standard observer, 10 nm, 380-780 nm.
CMF_1931 = """
380 0.001368 0.000039 0.006450
390 0.004243 0.000120 0.020050
400 0.014310 0.000396 0.067850
410 0.043510 0.001210 0.207400
420 0.134380 0.004000 0.645600
430 0.283900 0.011600 1.385600
440 0.348280 0.023000 1.747060
450 0.336200 0.038000 1.772110
460 0.290800 0.060000 1.669200
470 0.195360 0.090980 1.287640
480 0.095640 0.139020 0.812950
490 0.032010 0.208020 0.465180
500 0.004900 0.323000 0.272000
510 0.009300 0.503000 0.158200
520 0.063270 0.710000 0.078250
530 0.165500 0.862000 0.042160
540 0.290400 0.954000 0.020300
550 0.433450 0.994950 0.008750
560 0.594500 0.995000 0.003900
570 0.762100 0.952000 0.002100
580 0.916300 0.870000 0.001650
590 1.026300 0.757000 0.001100
600 1.062200 0.631000 0.000800
610 1.002600 0.503000 0.000340
620 0.854450 0.381000 0.000190
630 0.642400 0.265000 0.000050
640 0.447900 0.175000 0.000020
650 0.283500 0.107000 0.000000
660 0.164900 0.061000 0.000000
670 0.087400 0.032000 0.000000
680 0.046770 0.017000 0.000000
690 0.022700 0.008210 0.000000
700 0.011359 0.004102 0.000000
710 0.005790 0.002091 0.000000
720 0.002899 0.001047 0.000000
730 0.001440 0.000520 0.000000
740 0.000690 0.000249 0.000000
750 0.000332 0.000120 0.000000
760 0.000166 0.000060 0.000000
770 0.000083 0.000030 0.000000
780 0.000042 0.000015 0.000000
"""

# Oxy/deoxy haemoglobin molar extinction, cm^-1 / (mol/L), 10 nm.
# Compiled from the standard OMLC tabulation; Soret band 400-440, Q bands
# 540-580, deoxy bump near 760.
HEMOGLOBIN = """
380 26600 43128
390 33210 62640
400 266232 223296
410 466840 303956
420 480360 407560
430 246072 528600
440 102580 413280
450 62816 103292
460 44480 65972
470 33209 48720
480 26629 35308
490 23684 25773
500 20933 20862
510 20035 22112
520 24202 28307
530 39957 39036
540 53236 46592
550 43016 53412
560 32613 53788
570 44496 45092
580 50104 37020
590 14400 28324
600 3200 14677
610 1506 9443
620 942 6510
630 610 5149
640 442 4345
650 368 3750
660 320 3227
670 294 2795
680 278 2408
690 276 2052
700 290 1794
710 314 1540
720 348 1326
730 390 1102
740 446 1116
750 522 1405
760 586 1549
770 650 1312
780 710 1075
"""


def fixed_table(out: Path, name: str, text: str, header: list[str], comment: str, fmt="%.6f"):
    rows = np.array([[float(x) for x in line.split()] for line in text.strip().splitlines()])
    write_csv(out / name, comment, header, rows, fmt=fmt)


def gauss(lam, mu, sigma):
    return np.exp(-0.5 * ((lam - mu) / sigma) ** 2)


def fluorescents(out: Path):
    lam = np.arange(380.0, 781.0, 5.0)

    def lines(weights):
        # mercury emission lines; 578 nm doublet split over the 575/580 bins
        spd = np.zeros_like(lam)
        for centre, w in zip((405.0, 435.0, 545.0, 575.0, 580.0), weights):
            spd[lam == centre] += w
        return spd

    def halophosphate(blue_orange_ratio, line_strength):
        band = blue_orange_ratio * gauss(lam, 480, 45) + gauss(lam, 580, 42)
        return 60.0 * band + line_strength * lines((18, 30, 25, 8, 8))

    def broadband(w1, w2, w3, line_strength):
        band = w1 * gauss(lam, 450, 50) + w2 * gauss(lam, 540, 55) + w3 * gauss(lam, 625, 55)
        return 55.0 * band + line_strength * lines((10, 16, 14, 5, 5))

    def triband(wb, wg, wr, line_strength):
        band = wb * gauss(lam, 435, 11) + wg * gauss(lam, 545, 8) + wr * gauss(lam, 611, 8)
        return 90.0 * band + line_strength * lines((12, 20, 30, 10, 10)) + 3.0 * gauss(lam, 520, 90)

    spds = [
        halophosphate(1.10, 1.0),   # F1  daylight
        halophosphate(0.65, 1.0),   # F2  cool white
        halophosphate(0.45, 1.0),   # F3  white
        halophosphate(0.33, 1.0),   # F4  warm white
        halophosphate(1.20, 0.9),   # F5  daylight
        halophosphate(0.55, 0.9),   # F6  lite white
        broadband(1.00, 0.95, 0.80, 1.0),  # F7  broadband daylight
        broadband(0.80, 1.00, 0.95, 1.0),  # F8  broadband 5000K
        broadband(0.60, 0.95, 1.05, 1.0),  # F9  cool white deluxe
        triband(0.95, 1.00, 0.90, 1.0),    # F10
        triband(0.75, 1.00, 1.00, 1.0),    # F11
        triband(0.55, 0.95, 1.10, 1.0),    # F12
    ]
    rows = np.column_stack([lam] + spds)
    write_csv(
        out / "cie_f.csv",
        "Fluorescent illuminant SPDs F1-F12 (relative power).\n"
        "Modelled after the three CIE F families (halophosphate, broadband,\n"
        "tri-band): mercury lines at 405/435/545/578 nm plus phosphor bands.\n"
        "Plausible stand-ins, not the official CIE tables.",
        ["wavelength"] + [f"F{i}" for i in range(1, 13)],
        rows,
        fmt="%.4f",
    )


def cameras(out: Path, n_cameras=28, seed=20240406):
    lam = np.arange(400.0, 721.0, 10.0)
    rng = np.random.default_rng(seed)

    # channel = sum of a primary and a secondary lobe; cameras vary by a common
    # spectral shift, a common bandwidth factor, lobe-amplitude jitter, gain,
    # and a small smooth perturbation
    channels = {
        "r": ((600.0, 28.0, 0.90), (545.0, 22.0, 0.14)),
        "g": ((535.0, 32.0, 1.00), (620.0, 25.0, 0.06)),
        "b": ((465.0, 26.0, 0.95), (545.0, 30.0, 0.05)),
    }

    kern = gauss(np.arange(-4, 5, dtype=float), 0.0, 1.6)
    kern /= kern.sum()

    cols = []
    names = []
    for i in range(n_cameras):
        shift = rng.normal(0.0, 6.0)
        width = rng.normal(1.0, 0.055)
        for ch, lobes in channels.items():
            curve = np.zeros_like(lam)
            for mu, sigma, amp in lobes:
                amp_j = amp * rng.normal(1.0, 0.08)
                curve += amp_j * gauss(lam, mu + shift, sigma * width)
            curve *= rng.uniform(0.7, 1.0)
            noise = np.convolve(rng.normal(0.0, 1.0, lam.size), kern, mode="same")
            curve += 0.006 * noise
            cols.append(np.clip(curve, 0.0, None))
            names.append(f"cam{i + 1:02d}_{ch}")

    rows = np.column_stack([lam] + cols)
    write_csv(
        out / "camera_sensitivities.csv",
        f"Synthetic RGB spectral sensitivity ensemble ({n_cameras} cameras, 400-720 nm).\n"
        "Generated from a low-dimensional family (common spectral shift and\n"
        "bandwidth modes plus small smooth perturbations) so the ensemble has\n"
        "the low-rank structure of measured camera collections. Seeded and\n"
        "reproducible; see scripts/make_data.py.",
        ["wavelength"] + names,
        rows,
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    illuminant_a(out)
    fixed_table(
        out,
        "cie_d_components.csv",
        DAYLIGHT_COMPONENTS,
        ["wavelength", "S0", "S1", "S2"],
        "CIE daylight components S0, S1, S2 (CIE 15:2004 Table T.2).",
        fmt="%.2f",
    )
    fixed_table(
        out,
        "cmf_1931.csv",
        CMF_1931,
        ["wavelength", "xbar", "ybar", "zbar"],
        "CIE 1931 2-degree standard observer colour matching functions.",
    )
    fixed_table(
        out,
        "hemoglobin.csv",
        HEMOGLOBIN,
        ["wavelength", "oxy", "deoxy"],
        "Molar extinction of oxy-/deoxy-haemoglobin, cm^-1/(mol/L).\n"
        "Compiled from the standard OMLC tabulation (rounded/smoothed).",
        fmt="%.1f",
    )
    fluorescents(out)
    cameras(out)


if __name__ == "__main__":
    main()
