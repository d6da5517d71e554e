# app/datasim/__init__.py
