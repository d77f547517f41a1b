"""Physical constants and ion species definitions."""

from dataclasses import dataclass

import scipy.constants as _sc

ELEMENTARY_CHARGE = _sc.elementary_charge  # C
EPSILON_0 = _sc.epsilon_0  # F/m
HBAR = _sc.hbar  # J s
ATOMIC_MASS = _sc.atomic_mass  # kg
ELECTRON_MASS = _sc.electron_mass  # kg
COULOMB_K = 1.0 / (4.0 * _sc.pi * _sc.epsilon_0)  # N m^2 / C^2


@dataclass(frozen=True)
class IonSpecies:
    """A trapped ion: mass in kg, charge in C."""

    mass: float
    charge: float
    name: str = ""

    def __post_init__(self):
        if self.mass <= 0 or self.charge <= 0:
            raise ValueError("ion mass and charge must be positive")

    @classmethod
    def from_amu(cls, mass_amu: float, charge_e: float = 1.0, name: str = "") -> "IonSpecies":
        return cls(mass=mass_amu * ATOMIC_MASS, charge=charge_e * ELEMENTARY_CHARGE, name=name)

    @property
    def mass_amu(self) -> float:
        return self.mass / ATOMIC_MASS

    @property
    def charge_e(self) -> float:
        return self.charge / ELEMENTARY_CHARGE


# Singly ionized calcium-40: neutral atomic mass minus one electron.
CA40_MASS_AMU = 39.962590863 - ELECTRON_MASS / ATOMIC_MASS
CA40 = IonSpecies.from_amu(CA40_MASS_AMU, 1.0, name="Ca40+")

# Documented hardware figures that are recorded but not synthesized as processes.
DAC_NOISE_DENSITY_V_PER_RTHZ = 15e-9  # at 1 MHz, unfiltered output
RS232_BAUD = 115200
