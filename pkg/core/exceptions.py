"""
Exceptions du moteur QDiffusion

Toutes les erreurs levées par les modules de calcul dérivent de EngineError.
Les commandes de gestion les traduisent en CommandError avec un code de
sortie stable (voir core.commands).
"""

from __future__ import annotations

from typing import Optional


class EngineError(Exception):
    """Erreur de base du moteur"""


class ConfigError(EngineError):
    """Configuration invalide (clé inconnue, valeur hors domaine, incohérence)"""


class NumericBlowupError(ConfigError):
    """La trajectoire diverge : les constantes de l'ordonnanceur sont à revoir"""


class TensorFormatError(EngineError):
    """Fichier QDT1 illisible : magic, troncature, octets en trop, dépassement d'étendue"""


class NonFiniteError(EngineError, ValueError):
    """NaN ou Inf rencontré là où tout élément doit être fini"""


class ShapeMismatchError(EngineError, ValueError):
    """Dimensions incompatibles entre deux tenseurs"""


class ZeroNormError(EngineError, ValueError):
    """Norme de référence nulle : la métrique relative n'est pas définie"""


class HadamardError(EngineError, ValueError):
    """Taille de bloc invalide ou dernière dimension non alignée"""


class QuantizationError(EngineError, ValueError):
    """Codes ou métadonnées de quantification mal formés"""


class DegenerateFitError(EngineError):
    """Variance nulle des Γ : la régression linéaire est indéterminée"""

    def __init__(self, message: str, block_id: Optional[int] = None, layer_id: Optional[str] = None):
        super().__init__(message)
        self.block_id = block_id
        self.layer_id = layer_id


class UndefinedThresholdError(EngineError):
    """Pente nulle ou négative : le seuil τ_Γ ne peut pas être inversé"""


class MissingPredictorError(EngineError):
    """Aucun prédicteur pour une couche à router"""


class TraceFormatError(EngineError):
    """Ligne de trace mal formée"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyTraceError(EngineError):
    """Trace sans aucun enregistrement"""
