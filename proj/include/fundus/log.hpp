// Copyright 2026 The Fundus Pipeline Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <sstream>
#include <string>

namespace fundus::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

/// The initial level comes from FUNDUS_LOG_LEVEL (debug, info, warn, error, off).
void set_level(Level level);
Level level();
void write(Level level, const std::string& message);

inline void info(const std::string& m) { write(Level::info, m); }
inline void warn(const std::string& m) { write(Level::warn, m); }
inline void debug(const std::string& m) { write(Level::debug, m); }
inline void error(const std::string& m) { write(Level::error, m); }

}  // namespace fundus::log
