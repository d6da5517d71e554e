# app/numtext/__init__.py
