#include "dtcmr/diagnostics.hpp"

#include <iostream>
#include <mutex>

namespace dtcmr {
namespace {

std::mutex g_mutex;

WarningHandler& handler_slot() {
    static WarningHandler handler = [](const std::string& msg) {
        std::cerr << "dtcmr warning: " << msg << '\n';
    };
    return handler;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
    std::lock_guard lock(g_mutex);
    auto previous = std::move(handler_slot());
    handler_slot() = std::move(handler);
    return previous;
}

void warn(const std::string& message) {
    std::lock_guard lock(g_mutex);
    if (handler_slot()) handler_slot()(message);
}

WarningCapture::WarningCapture() {
    previous_ = set_warning_handler([this](const std::string& msg) { messages_.push_back(msg); });
}

WarningCapture::~WarningCapture() { set_warning_handler(std::move(previous_)); }

bool WarningCapture::contains(const std::string& needle) const {
    for (const auto& m : messages_)
        if (m.find(needle) != std::string::npos) return true;
    return false;
}

}  // namespace dtcmr
