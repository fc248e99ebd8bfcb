#pragma once

// Binary checkpoint: magic "IMAMLCK1", a length-prefixed text header, the
// segment table, then raw little-endian doubles in segment order. All integers
// are little-endian u64.

#include <string>

#include "imaml/params.hpp"

namespace imaml {

struct Checkpoint {
    std::string text;
    ParamVector values;
};

void write_checkpoint(const std::string& path, const std::string& text, const ParamVector& values);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace imaml
