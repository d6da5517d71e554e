# app/gait/__init__.py
