# Self-Organizing Prototypes toolkit
__version__ = '1.0.0'
