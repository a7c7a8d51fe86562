"""Rich terminal rendering."""
