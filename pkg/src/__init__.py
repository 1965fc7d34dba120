# Compressed GRU deconvolution for fluorescence lifetime imaging
