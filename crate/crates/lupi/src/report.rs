//! Result-tree reporting: CSV tables and SVG plots.

// implemented after the experiment module
