// Copyright 2026 The kmsd Authors
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

// Numerical core only; kmsd/io.hpp and kmsd/cli.hpp pull in the JSON and CLI dependencies.
#include "kmsd/derivation.hpp"
#include "kmsd/generator.hpp"
#include "kmsd/matrix_core.hpp"
#include "kmsd/random.hpp"
#include "kmsd/report.hpp"
#include "kmsd/superop.hpp"
#include "kmsd/vtransform.hpp"
