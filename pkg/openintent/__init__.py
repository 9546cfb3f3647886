from openintent.boundary import BoundaryModel as BoundaryModel
from openintent.config import RunConfig as RunConfig
from openintent.model import EncoderModel as EncoderModel
from openintent.version import __version__ as __version__
