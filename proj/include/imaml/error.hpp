#pragma once

#include <stdexcept>
#include <string>

namespace imaml {

/// Single exception type for all library failures. Messages name the failing
/// operation first ("conv2d: ...") so context chains read outside-in.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Prepends `context` to the message of a caught Error.
[[noreturn]] inline void rethrow_with_context(const std::string& context, const std::exception& e) {
    throw Error(context + ": " + e.what());
}

}  // namespace imaml
