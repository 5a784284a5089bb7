#pragma once

// Choice datasets as CSV: header `y,x1_1,..,x1_p,x2_1,..,x(K-1)_p`, one row per
// observation. y is 1-based in the file and alternative K is the reference, whose
// covariates are identically zero and therefore not stored.

#include <filesystem>
#include <string>

#include "cemu/estimation.hpp"

namespace cemu {

void write_dataset_csv(const std::filesystem::path& path, const ChoiceDataset& data);

/// K and p come from the header. The GHK seed is not stored; it is left at 0.
ChoiceDataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace cemu
