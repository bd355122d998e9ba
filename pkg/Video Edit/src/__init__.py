"""Video Edit - training-free toy video editing with cross-frame attention injection"""

__version__ = "1.0.0"
