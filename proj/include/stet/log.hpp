#pragma once

#include <functional>
#include <string_view>

namespace stet {

using WarningSink = std::function<void(std::string_view)>;

// Non-fatal diagnostics (clamped windows, empty inputs). Default sink is stderr.
void warn(std::string_view message);
// Returns the previous sink. Pass {} to restore the default.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace stet
