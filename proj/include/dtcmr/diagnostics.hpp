#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtcmr {

/// Thrown for every precondition or I/O failure in the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using WarningHandler = std::function<void(const std::string&)>;

/// Replaces the process-wide warning sink (stderr by default). Returns the previous one.
WarningHandler set_warning_handler(WarningHandler handler);

void warn(const std::string& message);

/// Collects warnings emitted during its lifetime instead of printing them.
class WarningCapture {
public:
    WarningCapture();
    ~WarningCapture();
    WarningCapture(const WarningCapture&) = delete;
    WarningCapture& operator=(const WarningCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }
    bool contains(const std::string& needle) const;

private:
    std::vector<std::string> messages_;
    WarningHandler previous_;
};

}  // namespace dtcmr
