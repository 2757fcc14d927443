#pragma once

// Minimal 8-bit grayscale PNG writer (zlib-deflated, no filtering).

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fsr {

void write_gray_png(const std::filesystem::path& path, int width, int height,
                    const std::vector<uint8_t>& pixels);

}  // namespace fsr
