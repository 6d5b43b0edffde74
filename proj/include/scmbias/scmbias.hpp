#pragma once

// Umbrella header.

#include "scmbias/ceat.hpp"
#include "scmbias/corpus.hpp"
#include "scmbias/debias.hpp"
#include "scmbias/embed.hpp"
#include "scmbias/errors.hpp"
#include "scmbias/hash.hpp"
#include "scmbias/lexicon.hpp"
#include "scmbias/manifest.hpp"
#include "scmbias/report.hpp"
#include "scmbias/rng.hpp"
#include "scmbias/toy_encoder.hpp"
#include "scmbias/version.hpp"
